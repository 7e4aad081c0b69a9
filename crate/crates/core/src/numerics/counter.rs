use std::collections::BTreeMap;

/// Multiply-add tally keyed by the label that was active when a product ran.
///
/// One fused multiply-add counts as one operation. Counts only ever grow
/// until [`OpCounter::reset`] is called.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    by_label: BTreeMap<String, u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: &str, mul_adds: u64) {
        *self.by_label.entry(label.to_owned()).or_insert(0) += mul_adds;
    }

    pub fn get(&self, label: &str) -> u64 {
        self.by_label.get(label).copied().unwrap_or(0)
    }

    /// Sum over every label starting with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> u64 {
        self.by_label.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum()
    }

    pub fn total(&self) -> u64 {
        self.by_label.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_label.is_empty()
    }

    pub fn reset(&mut self) {
        self.by_label.clear();
    }

    pub fn labels(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_label.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
