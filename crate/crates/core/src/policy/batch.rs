/// One row of a [`TokenBatch`] before padding.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub loss_weight: Vec<f64>,
}

/// Padded token matrix with per-position attention mask and loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub width: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub loss_weight: Vec<f64>,
    /// Number of non-PAD positions in each row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads rows to a common width with `pad`.
    pub fn from_rows(rows: &[BatchRow], pad: u32) -> crate::Result<Self> {
        let width = rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
        let mut b = TokenBatch {
            width,
            tokens: Vec::with_capacity(rows.len() * width),
            mask: Vec::with_capacity(rows.len() * width),
            loss_weight: Vec::with_capacity(rows.len() * width),
            lengths: Vec::with_capacity(rows.len()),
        };
        for (i, r) in rows.iter().enumerate() {
            if r.mask.len() != r.tokens.len() || r.loss_weight.len() != r.tokens.len() {
                return crate::error::input(format!("row {i}: mask/weight length mismatch"));
            }
            let n = r.tokens.len();
            b.tokens.extend_from_slice(&r.tokens);
            b.tokens.extend(std::iter::repeat(pad).take(width - n));
            b.mask.extend_from_slice(&r.mask);
            b.mask.extend(std::iter::repeat(0).take(width - n));
            b.loss_weight.extend_from_slice(&r.loss_weight);
            b.loss_weight.extend(std::iter::repeat(0.0).take(width - n));
            b.lengths.push(n);
        }
        b.validate(pad)?;
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn row_mask(&self, i: usize) -> &[u8] {
        &self.mask[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn row_weights(&self, i: usize) -> &[f64] {
        &self.loss_weight[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn validate(&self, pad: u32) -> crate::Result<()> {
        let n = self.rows();
        if self.tokens.len() != n * self.width
            || self.mask.len() != n * self.width
            || self.loss_weight.len() != n * self.width
        {
            return crate::error::input("batch matrices have inconsistent shapes");
        }
        for i in 0..n {
            let len = self.lengths[i];
            if len > self.width {
                return crate::error::input(format!("row {i}: length exceeds width"));
            }
            if len > 0 && self.mask[i * self.width] == 0 {
                return crate::error::input(format!("row {i}: first position must be visible"));
            }
            for t in 0..self.width {
                let at = i * self.width + t;
                if self.mask[at] > 1 {
                    return crate::error::input("mask entries must be 0 or 1");
                }
                let is_pad = t >= len || self.tokens[at] == pad;
                if is_pad && (self.mask[at] != 0 || self.loss_weight[at] != 0.0) {
                    return crate::error::input(format!(
                        "row {i} position {t}: PAD must carry mask 0 and loss weight 0"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Row-major `rows × width` matrix of per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub width: usize,
    pub values: Vec<f64>,
}

impl LogProbs {
    pub fn at(&self, row: usize, t: usize) -> f64 {
        self.values[row * self.width + t]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_positions_are_masked() {
        let rows = vec![
            BatchRow { tokens: vec![1, 2, 3], mask: vec![1, 1, 1], loss_weight: vec![0.0, 1.0, 1.0] },
            BatchRow { tokens: vec![1, 2], mask: vec![1, 1], loss_weight: vec![0.0, 1.0] },
        ];
        let b = TokenBatch::from_rows(&rows, 9).unwrap();
        assert_eq!(b.width, 3);
        assert_eq!(b.tokens[5], 9);
        assert_eq!(b.mask[5], 0);
        assert_eq!(b.loss_weight[5], 0.0);
    }

    #[test]
    fn weighted_pad_rejected() {
        let rows = vec![BatchRow { tokens: vec![1, 9], mask: vec![1, 1], loss_weight: vec![0.0, 1.0] }];
        assert!(TokenBatch::from_rows(&rows, 9).is_err());
    }
}
