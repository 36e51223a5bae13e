//! Binary morphology on patch grids with a full 3×3 structuring element.
//!
//! Border convention: dilation treats out-of-grid neighbours as false;
//! erosion ignores them. The two operators form an adjunction on the grid,
//! so their composition is a proper closing (extensive and idempotent).

use crate::tensor::Grid;

fn neighbours(grid: Grid, idx: usize) -> impl Iterator<Item = usize> {
    let (r, c) = grid.coords(idx);
    let r0 = r.saturating_sub(1);
    let c0 = c.saturating_sub(1);
    let r1 = (r + 1).min(grid.height - 1);
    let c1 = (c + 1).min(grid.width - 1);
    (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |cc| grid.index(rr, cc)))
}

pub fn dilate(bits: &[bool], grid: Grid) -> Vec<bool> {
    assert_eq!(bits.len(), grid.len());
    (0..grid.len())
        .map(|i| neighbours(grid, i).any(|j| bits[j]))
        .collect()
}

pub fn erode(bits: &[bool], grid: Grid) -> Vec<bool> {
    assert_eq!(bits.len(), grid.len());
    (0..grid.len())
        .map(|i| neighbours(grid, i).all(|j| bits[j]))
        .collect()
}

/// Dilation followed by erosion.
pub fn morphological_close(bits: &[bool], grid: Grid) -> Vec<bool> {
    erode(&dilate(bits, grid), grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(rows: &[&str]) -> (Vec<bool>, Grid) {
        let grid = Grid::new(rows.len(), rows[0].len());
        let bits = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        (bits, grid)
    }

    #[test]
    fn empty_stays_empty() {
        let g = Grid::new(5, 4);
        assert!(morphological_close(&[false; 20], g).iter().all(|&b| !b));
    }

    #[test]
    fn fills_single_hole() {
        let (bits, g) = parse(&[
            ".......", //
            ".......",
            "..###..",
            "..#.#..",
            "..###..",
            ".......",
            ".......",
        ]);
        let (want, _) = parse(&[
            ".......", //
            ".......",
            "..###..",
            "..###..",
            "..###..",
            ".......",
            ".......",
        ]);
        assert_eq!(morphological_close(&bits, g), want);
    }

    #[test]
    fn convex_block_unchanged() {
        let (bits, g) = parse(&[
            ".......", //
            ".......",
            "..###..",
            "..###..",
            ".......",
            ".......",
        ]);
        assert_eq!(morphological_close(&bits, g), bits);
    }

    #[test]
    fn block_touching_border_unchanged() {
        let (bits, g) = parse(&[
            "##....", //
            "##....",
            "......",
            "......",
        ]);
        assert_eq!(morphological_close(&bits, g), bits);
    }

    #[test]
    fn one_patch_gap_to_border_is_filled() {
        let (bits, g) = parse(&[
            "......", //
            ".##...",
            ".##...",
            "......",
            "......",
        ]);
        let (want, _) = parse(&[
            "###...", //
            "###...",
            "###...",
            "......",
            "......",
        ]);
        assert_eq!(morphological_close(&bits, g), want);
    }

    #[test]
    fn bridges_one_patch_gap() {
        let (bits, g) = parse(&[
            ".........", //
            ".........",
            "..##.##..",
            "..##.##..",
            ".........",
            ".........",
        ]);
        let (want, _) = parse(&[
            ".........", //
            ".........",
            "..#####..",
            "..#####..",
            ".........",
            ".........",
        ]);
        assert_eq!(morphological_close(&bits, g), want);
    }
}
