//! CFA pattern model: Quad Bayer with event-pixel substitutions.

use crate::error::{Error, Result};

/// Per-pixel color filter tag. `Event` marks a position carrying no color
/// sample at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
    Event,
}

impl CfaColor {
    /// RGB channel index for a color tag; `None` for event pixels.
    pub fn channel(self) -> Option<usize> {
        match self {
            CfaColor::Red => Some(0),
            CfaColor::Green => Some(1),
            CfaColor::Blue => Some(2),
            CfaColor::Event => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            CfaColor::Red => 'R',
            CfaColor::Green => 'G',
            CfaColor::Blue => 'B',
            CfaColor::Event => 'E',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            'R' => Ok(CfaColor::Red),
            'G' => Ok(CfaColor::Green),
            'B' => Ok(CfaColor::Blue),
            'E' => Ok(CfaColor::Event),
            other => Err(Error::config(format!("invalid CFA tile char '{other}'"))),
        }
    }
}

/// The repeating 4x4 CFA tile: Quad Bayer quadrants (R / G over G / B, each
/// quadrant 2x2 single-colored) with exactly two positions replaced by event
/// pixels. Tiles the image with period 4 in both axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSpec {
    tile: [[CfaColor; 4]; 4],
    event_coords: [(usize, usize); 2],
}

/// Quad Bayer quadrant color before event substitution.
fn quad_bayer_base(row: usize, col: usize) -> CfaColor {
    match (row / 2, col / 2) {
        (0, 0) => CfaColor::Red,
        (0, 1) => CfaColor::Green,
        (1, 0) => CfaColor::Green,
        (1, 1) => CfaColor::Blue,
        _ => unreachable!(),
    }
}

impl PatternSpec {
    /// Quad Bayer tile with event pixels at the given in-tile coordinates.
    pub fn new(event_coords: [(usize, usize); 2]) -> Result<Self> {
        let (a, b) = (event_coords[0], event_coords[1]);
        for &(r, c) in &[a, b] {
            if r >= 4 || c >= 4 {
                return Err(Error::config(format!(
                    "event coordinate ({r},{c}) outside the 4x4 tile"
                )));
            }
        }
        if a == b {
            return Err(Error::config("event coordinates must be distinct"));
        }
        let mut tile = [[CfaColor::Red; 4]; 4];
        for (r, row) in tile.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = if (r, c) == a || (r, c) == b {
                    CfaColor::Event
                } else {
                    quad_bayer_base(r, c)
                };
            }
        }
        Ok(PatternSpec {
            tile,
            event_coords,
        })
    }

    /// Default pattern: one event pixel in the red quadrant, one in the blue.
    pub fn default_hybridevs() -> Self {
        PatternSpec::new([(1, 1), (2, 2)]).unwrap()
    }

    pub fn event_coords(&self) -> [(usize, usize); 2] {
        self.event_coords
    }

    /// Color at absolute image coordinates; periodic with period 4.
    pub fn color_at(&self, row: usize, col: usize) -> CfaColor {
        self.tile[row % 4][col % 4]
    }

    pub fn is_event(&self, row: usize, col: usize) -> bool {
        self.color_at(row, col) == CfaColor::Event
    }

    /// 16-character row-major serialization over {R,G,B,E}.
    pub fn tile_string(&self) -> String {
        self.tile
            .iter()
            .flat_map(|row| row.iter().map(|c| c.to_char()))
            .collect()
    }

    /// Rebuild from the 16-character tile string; validates the Quad Bayer
    /// structure and the two-event invariant.
    pub fn from_tile_string(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 16 {
            return Err(Error::config(format!(
                "pattern string must have 16 characters, got {}",
                chars.len()
            )));
        }
        let mut events = Vec::new();
        for (idx, &ch) in chars.iter().enumerate() {
            let (r, c) = (idx / 4, idx % 4);
            match CfaColor::from_char(ch)? {
                CfaColor::Event => events.push((r, c)),
                color => {
                    if color != quad_bayer_base(r, c) {
                        return Err(Error::config(format!(
                            "tile position ({r},{c}) is {ch} but Quad Bayer expects {}",
                            quad_bayer_base(r, c).to_char()
                        )));
                    }
                }
            }
        }
        if events.len() != 2 {
            return Err(Error::config(format!(
                "tile must contain exactly 2 event pixels, got {}",
                events.len()
            )));
        }
        PatternSpec::new([events[0], events[1]])
    }
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec::default_hybridevs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tile_corners() {
        let p = PatternSpec::default_hybridevs();
        assert_eq!(p.color_at(0, 0), CfaColor::Red);
        assert_eq!(p.color_at(0, 3), CfaColor::Green);
        assert_eq!(p.color_at(3, 0), CfaColor::Green);
        assert_eq!(p.color_at(3, 3), CfaColor::Blue);
    }

    #[test]
    fn periodicity() {
        let p = PatternSpec::default_hybridevs();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(p.color_at(r, c), p.color_at(r + 4, c));
                assert_eq!(p.color_at(r, c), p.color_at(r, c + 4));
            }
        }
        assert_eq!(p.color_at(4, 4), p.color_at(0, 0));
    }

    #[test]
    fn event_coords_are_events() {
        let p = PatternSpec::default_hybridevs();
        for (r, c) in p.event_coords() {
            assert_eq!(p.color_at(r, c), CfaColor::Event);
        }
        let n_events = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| p.is_event(r, c))
            .count();
        assert_eq!(n_events, 2);
    }

    #[test]
    fn tile_string_round_trip() {
        let p = PatternSpec::new([(0, 0), (3, 3)]).unwrap();
        let s = p.tile_string();
        assert_eq!(s.len(), 16);
        let q = PatternSpec::from_tile_string(&s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn malformed_tile_strings_rejected() {
        assert!(PatternSpec::from_tile_string("RRGG").is_err());
        // wrong base color at (0,0)
        assert!(PatternSpec::from_tile_string("BRGGRRGGGGBBGGBE").is_err());
        // only one event
        assert!(PatternSpec::from_tile_string("RRGGRRGGGGBBGGBE").is_err());
        assert!(PatternSpec::new([(1, 1), (1, 1)]).is_err());
        assert!(PatternSpec::new([(4, 0), (0, 0)]).is_err());
    }
}
