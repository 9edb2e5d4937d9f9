/// Approximate token counting for context budgets and export limits.
pub trait TokenEstimator: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated words times `per_word_tenths / 10`, rounded up.
/// The default ratio is 1.3 tokens per word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WhitespaceEstimator {
    pub per_word_tenths: usize,
}

impl Default for WhitespaceEstimator {
    fn default() -> Self {
        Self { per_word_tenths: 13 }
    }
}

impl TokenEstimator for WhitespaceEstimator {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * self.per_word_tenths).div_ceil(10)
    }
}
