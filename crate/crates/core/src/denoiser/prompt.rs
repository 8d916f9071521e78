use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Fixed 8-word vocabulary: three colors, three shapes, null and pad.
pub const VOCAB: [&str; 8] = [
    "red", "green", "blue", "circle", "square", "triangle", "<null>", "<pad>",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const NULL_TOKEN: usize = 6;
pub const PAD_TOKEN: usize = 7;
/// Tokens per prompt: a color slot and a shape slot.
pub const PROMPT_LEN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn token(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.85, 0.15, 0.15],
            Color::Green => [0.15, 0.75, 0.2],
            Color::Blue => [0.15, 0.25, 0.85],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn token(self) -> usize {
        3 + self as usize
    }
}

/// A two-token prompt `[color, shape]`; the null prompt is `[null, null]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    tokens: [usize; PROMPT_LEN],
}

impl Prompt {
    pub fn new(color: Color, shape: Shape) -> Self {
        Self {
            tokens: [color.token(), shape.token()],
        }
    }

    pub fn null() -> Self {
        Self {
            tokens: [NULL_TOKEN; PROMPT_LEN],
        }
    }

    /// Any pair of vocabulary ids, in any order.
    pub fn from_tokens(tokens: [usize; PROMPT_LEN]) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(arg_err!("token id {bad} outside vocabulary"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize; PROMPT_LEN] {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [NULL_TOKEN; PROMPT_LEN]
    }

    pub fn color(&self) -> Option<Color> {
        self.tokens.iter().find_map(|&t| Color::ALL.get(t).copied())
    }

    pub fn shape(&self) -> Option<Shape> {
        self.tokens
            .iter()
            .find_map(|&t| t.checked_sub(3).and_then(|i| Shape::ALL.get(i).copied()))
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", VOCAB[self.tokens[0]], VOCAB[self.tokens[1]])
    }
}

impl FromStr for Prompt {
    type Err = Error;

    /// Parses two whitespace-separated vocabulary words, e.g. `"red circle"`.
    /// An empty string is the null prompt.
    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        if words.is_empty() {
            return Ok(Self::null());
        }
        if words.len() != PROMPT_LEN {
            return Err(arg_err!(
                "prompt {s:?} must have exactly {PROMPT_LEN} words"
            ));
        }
        let mut tokens = [0; PROMPT_LEN];
        for (slot, w) in tokens.iter_mut().zip(&words) {
            *slot = VOCAB
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| arg_err!("unknown word {w:?}"))?;
        }
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let p: Prompt = "red circle".parse().unwrap();
        assert_eq!(p, Prompt::new(Color::Red, Shape::Circle));
        assert_eq!(p.to_string(), "red circle");
        assert_eq!("".parse::<Prompt>().unwrap(), Prompt::null());
        assert!("red".parse::<Prompt>().is_err());
        assert!("red hexagon".parse::<Prompt>().is_err());
    }

    #[test]
    fn accessors() {
        let p = Prompt::from_tokens([Shape::Triangle.token(), Color::Blue.token()]).unwrap();
        assert_eq!(p.color(), Some(Color::Blue));
        assert_eq!(p.shape(), Some(Shape::Triangle));
        assert!(Prompt::null().is_null());
        assert_eq!(Prompt::null().color(), None);
        assert!(Prompt::from_tokens([0, 8]).is_err());
    }
}
