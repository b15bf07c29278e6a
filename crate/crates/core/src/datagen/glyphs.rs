//! 5×7 bitmap digits, one row per string, `#` marks ink.

pub const WIDTH: usize = 5;
pub const HEIGHT: usize = 7;

const DIGITS: [[&str; HEIGHT]; 10] = [
    [
        ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.",
    ],
    [
        "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
    ],
    [
        ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
    ],
    [
        "#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###.",
    ],
    [
        "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.",
    ],
    [
        "#####", "#....", "####.", "....#", "....#", "#...#", ".###.",
    ],
    [
        "..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.",
    ],
    [
        "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...",
    ],
    [
        ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.",
    ],
    [
        ".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..",
    ],
];

pub const COUNT: usize = DIGITS.len();

/// Whether cell `(row, col)` of digit `class` is inked.
pub fn ink(class: usize, row: usize, col: usize) -> bool {
    DIGITS[class][row].as_bytes()[col] == b'#'
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_well_formed() {
        for (c, rows) in DIGITS.iter().enumerate() {
            assert!(rows.iter().all(|r| r.len() == WIDTH), "digit {c}");
            for (other, rest) in DIGITS.iter().enumerate().skip(c + 1) {
                assert_ne!(rows, rest, "digits {c} and {other}");
            }
        }
        assert!(ink(1, 0, 2) && !ink(1, 0, 0));
    }
}
