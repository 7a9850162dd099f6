//! Connected-component labeling with 8-connectivity, union-find based.

/// Labels the `true` pixels of `member` by connected component. Returns the
/// per-pixel labels (`0` for background, components numbered `1..=count` in
/// row-major order of first appearance) and the component count.
pub fn connected_components(member: &[bool], height: usize, width: usize) -> (Vec<u32>, u32) {
    assert_eq!(member.len(), height * width);
    let mut parent: Vec<u32> = (0..member.len() as u32).collect();

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    fn union(parent: &mut [u32], a: u32, b: u32) {
        let ra = find(parent, a);
        let rb = find(parent, b);
        if ra != rb {
            parent[rb.max(ra) as usize] = rb.min(ra);
        }
    }

    for h in 0..height {
        for w in 0..width {
            let idx = h * width + w;
            if !member[idx] {
                continue;
            }
            // Already-visited neighbors: W, NW, N, NE.
            if w > 0 && member[idx - 1] {
                union(&mut parent, idx as u32, (idx - 1) as u32);
            }
            if h > 0 {
                let up = idx - width;
                if w > 0 && member[up - 1] {
                    union(&mut parent, idx as u32, (up - 1) as u32);
                }
                if member[up] {
                    union(&mut parent, idx as u32, up as u32);
                }
                if w + 1 < width && member[up + 1] {
                    union(&mut parent, idx as u32, (up + 1) as u32);
                }
            }
        }
    }

    let mut labels = vec![0u32; member.len()];
    let mut remap: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut next = 1u32;
    for idx in 0..member.len() {
        if !member[idx] {
            continue;
        }
        let root = find(&mut parent, idx as u32);
        labels[idx] = *remap.entry(root).or_insert_with(|| {
            let v = next;
            next += 1;
            v
        });
    }
    (labels, next - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_connect() {
        // 8-connectivity joins the diagonal.
        let member = vec![true, false, false, true];
        let (labels, count) = connected_components(&member, 2, 2);
        assert_eq!(count, 1);
        assert_eq!(labels, vec![1, 0, 0, 1]);
    }

    #[test]
    fn separated_blobs_get_distinct_labels() {
        let member = vec![
            true, false, false, true, //
            false, false, false, false, //
            true, true, false, false,
        ];
        let (labels, count) = connected_components(&member, 3, 4);
        assert_eq!(count, 3);
        assert_eq!(labels[0], 1);
        assert_eq!(labels[3], 2);
        assert_eq!(labels[8], 3);
        assert_eq!(labels[9], 3);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let (labels, count) = connected_components(&[false; 6], 2, 3);
        assert_eq!(count, 0);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn full_mask_is_one_component() {
        let (labels, count) = connected_components(&[true; 12], 3, 4);
        assert_eq!(count, 1);
        assert!(labels.iter().all(|&l| l == 1));
    }
}
