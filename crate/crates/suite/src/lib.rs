//! Holds the `acceptance` test target. It lives in its own package so that it runs after every other test in the workspace.
