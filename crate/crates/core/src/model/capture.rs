use alloc::vec::Vec;

/// How much attention to record during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaptureMode {
    #[default]
    None,
    /// CLS-query rows of every layer and head.
    ClsRows,
    /// CLS rows plus head-averaged full matrices (needed for rollout).
    Full,
}

/// Attention recorded for one participant over `n = N + 1` positions
/// (CLS first).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layers: usize,
    pub heads: usize,
    pub n: usize,
    /// `[layer][head][n]`.
    pub cls_rows: Vec<f64>,
    /// `[layer][n][n]`, head-averaged.
    pub full: Option<Vec<f64>>,
}

impl AttentionCapture {
    pub fn cls_row(&self, layer: usize, head: usize) -> &[f64] {
        let at = (layer * self.heads + head) * self.n;
        &self.cls_rows[at..at + self.n]
    }

    pub fn matrix(&self, layer: usize) -> Option<&[f64]> {
        let nn = self.n * self.n;
        self.full.as_ref().map(|f| &f[layer * nn..(layer + 1) * nn])
    }
}
