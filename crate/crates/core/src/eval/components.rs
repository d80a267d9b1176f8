use crate::raster::Raster;

/// 8-connected labeling of a binary mask. Label 0 is background; components
/// are numbered 1..=count in order of their first pixel in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentLabeling {
    pub labels: Raster<u32>,
    pub count: usize,
    /// `sizes[i]` is the pixel count of label `i + 1`.
    pub sizes: Vec<usize>,
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let up = parent[parent[a as usize] as usize];
        parent[a as usize] = up;
        a = up;
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    // Keep the smaller provisional label as root so roots stay in
    // first-pixel order.
    if ra < rb {
        parent[rb as usize] = ra;
    } else if rb < ra {
        parent[ra as usize] = rb;
    }
}

/// Two-pass union-find labeling. Any nonzero pixel is foreground.
pub fn connected_components(mask: &Raster<u8>) -> ComponentLabeling {
    let (h, w) = (mask.height, mask.width);
    let mut labels = Raster::filled(h, w, 0u32);
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let mut current = 0u32;
            let neighbours = [
                (y > 0 && x > 0).then(|| (y - 1, x - 1)),
                (y > 0).then(|| (y - 1, x)),
                (y > 0 && x + 1 < w).then(|| (y - 1, x + 1)),
                (x > 0).then(|| (y, x - 1)),
            ];
            for (ny, nx) in neighbours.into_iter().flatten() {
                let l = labels.get(ny, nx);
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = l;
                } else {
                    union(&mut parent, current, l);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels.set(y, x, current);
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in 1..parent.len() as u32 {
        let root = find(&mut parent, l);
        if root == l {
            count += 1;
            remap[l as usize] = count;
        }
    }
    let mut sizes = vec![0usize; count as usize];
    for v in labels.data.iter_mut() {
        if *v != 0 {
            *v = remap[find(&mut parent, *v) as usize];
            sizes[*v as usize - 1] += 1;
        }
    }
    ComponentLabeling {
        labels,
        count: count as usize,
        sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Raster<u8> {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| u8::from(b == b'#'))).collect();
        Raster::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn empty_mask_has_no_components() {
        let c = connected_components(&Raster::filled(4, 5, 0));
        assert_eq!(c.count, 0);
        assert!(c.sizes.is_empty());
    }

    #[test]
    fn diagonal_neighbours_merge() {
        let c = connected_components(&mask(&["#.", ".#"]));
        assert_eq!(c.count, 1);
        assert_eq!(c.sizes, vec![2]);
    }

    #[test]
    fn u_shape_merges_late_and_keeps_first_pixel_order() {
        let c = connected_components(&mask(&["#.#..#", "#.#...", "###..."]));
        assert_eq!(c.count, 2);
        assert_eq!(c.sizes, vec![7, 1]);
        assert_eq!(c.labels.get(0, 2), 1);
        assert_eq!(c.labels.get(0, 5), 2);
    }
}
