use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn inverted(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Polarity::Positive
    }
}

/// A click in source pixel coordinates; `index` is the 1-based interaction number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    pub index: usize,
}

impl ClickPoint {
    pub fn new(row: usize, col: usize, polarity: Polarity) -> Self {
        Self { row, col, polarity, index: 0 }
    }
}

/// Ordered clicks of one episode. The last click is the current one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickHistory {
    clicks: Vec<ClickPoint>,
}

impl ClickHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a click, assigning the next interaction index.
    pub fn push(&mut self, mut click: ClickPoint) -> ClickPoint {
        click.index = self.next_index();
        self.clicks.push(click);
        click
    }

    /// Appends a click that already carries its index.
    pub fn push_indexed(&mut self, click: ClickPoint) -> Result<()> {
        if click.index == 0 || self.clicks.last().is_some_and(|c| c.index >= click.index) {
            return Err(Error::Invalid(format!("click index {} does not follow the history", click.index)));
        }
        self.clicks.push(click);
        Ok(())
    }

    pub fn next_index(&self) -> usize {
        self.clicks.last().map_or(1, |c| c.index + 1)
    }

    pub fn clicks(&self) -> &[ClickPoint] {
        &self.clicks
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn current(&self) -> Option<&ClickPoint> {
        self.clicks.last()
    }

    pub fn historical(&self) -> &[ClickPoint] {
        &self.clicks[..self.clicks.len().saturating_sub(1)]
    }

    pub fn positives(&self) -> impl Iterator<Item = &ClickPoint> {
        self.clicks.iter().filter(|c| c.polarity.is_positive())
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        match self.clicks.iter().find(|c| c.row >= height || c.col >= width) {
            Some(c) => Err(Error::Invalid(format!("click ({}, {}) outside {height}x{width}", c.row, c.col))),
            None => Ok(()),
        }
    }
}
