use crate::error::{ensure, Result};

/// Row-major `S × S` allow-matrix over `[enrollments; test frames]`, with
/// `S = M + T_pad`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub enrollments: usize,
    pub valid_len: usize,
    size: usize,
    allow: Vec<bool>,
    /// `true` for padded test positions.
    pub key_padding: Vec<bool>,
}

impl AttentionMask {
    /// Builds the mask; `test_attends_enrollment` additionally opens test
    /// rows onto enrollment columns.
    pub fn new(m: usize, valid_len: usize, t_pad: usize, test_attends_enrollment: bool) -> Result<Self> {
        ensure!(m >= 1, InvalidArgument, "mask needs at least one enrollment");
        ensure!(
            valid_len >= 1 && t_pad >= valid_len,
            InvalidArgument,
            "need 1 <= valid_len ({valid_len}) <= T_pad ({t_pad})"
        );
        let s = m + t_pad;
        let valid = |j: usize| j >= m && j < m + valid_len;
        let mut allow = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                allow[i * s + j] = if i < m {
                    j == i || valid(j)
                } else if j < m {
                    test_attends_enrollment
                } else {
                    valid(j)
                };
            }
        }
        Ok(Self {
            enrollments: m,
            valid_len,
            size: s,
            allow,
            key_padding: (0..s).map(|j| j >= m + valid_len).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.size..(i + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// The default mask: enrollments see themselves and the valid test frames;
/// test frames see only valid test frames. Padded columns are closed to
/// every row, their own diagonal included.
pub fn build_attention_mask(m: usize, valid_len: usize, t_pad: usize) -> Result<AttentionMask> {
    AttentionMask::new(m, valid_len, t_pad, false)
}
