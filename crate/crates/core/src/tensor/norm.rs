use super::{Mode, ParamBank, ParamId, Tape, Tensor, TensorId};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization over the rows of an `[n×d]` matrix.
///
/// Train mode normalizes with the current batch statistics; running
/// statistics (bank state entries) are refreshed from accumulated per-forward
/// stats when [`BatchNorm::commit_running_stats`] is called, once per
/// optimizer step, pooling every row seen since the last commit.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    dim: usize,
    // pooled accumulators across the forwards of one optimizer step
    acc_sum: Vec<f64>,
    acc_sumsq: Vec<f64>,
    acc_rows: usize,
}

impl BatchNorm {
    pub fn new(bank: &mut ParamBank, prefix: &str, dim: usize) -> Self {
        let gamma = bank.param(format!("{prefix}.gamma"), {
            Tensor::new(vec![dim], vec![1.0; dim]).expect("gamma shape")
        });
        let beta = bank.param(format!("{prefix}.beta"), Tensor::zeros(vec![dim]));
        let running_mean = bank.state(format!("{prefix}.running_mean"), Tensor::zeros(vec![dim]));
        let running_var = bank.state(format!("{prefix}.running_var"), {
            Tensor::new(vec![dim], vec![1.0; dim]).expect("var shape")
        });
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            dim,
            acc_sum: vec![0.0; dim],
            acc_sumsq: vec![0.0; dim],
            acc_rows: 0,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bank: &ParamBank,
        x: TensorId,
        mode: Mode,
    ) -> Result<TensorId> {
        match mode {
            Mode::Train => {
                let gamma = tape.param(bank, self.gamma);
                let beta = tape.param(bank, self.beta);
                let (out, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                for j in 0..self.dim {
                    let m = stats.mean[j];
                    self.acc_sum[j] += m * stats.rows as f64;
                    self.acc_sumsq[j] += (stats.var[j] + m * m) * stats.rows as f64;
                }
                self.acc_rows += stats.rows;
                Ok(out)
            }
            Mode::Eval => {
                let gamma = &bank.get(self.gamma).data;
                let beta = &bank.get(self.beta).data;
                let rm = &bank.get(self.running_mean).data;
                let rv = &bank.get(self.running_var).data;
                let mut scale = vec![0.0; self.dim];
                let mut shift = vec![0.0; self.dim];
                for j in 0..self.dim {
                    scale[j] = gamma[j] / (rv[j] + self.eps).sqrt();
                    shift[j] = beta[j] - rm[j] * scale[j];
                }
                tape.col_affine(x, &scale, &shift)
            }
        }
    }

    /// Folds pooled batch statistics into the running estimates.
    pub fn commit_running_stats(&mut self, bank: &mut ParamBank) {
        if self.acc_rows == 0 {
            return;
        }
        let n = self.acc_rows as f64;
        for j in 0..self.dim {
            let mean = self.acc_sum[j] / n;
            let var = (self.acc_sumsq[j] / n - mean * mean).max(0.0);
            let rm = &mut bank.get_mut(self.running_mean).data[j];
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean;
            let rv = &mut bank.get_mut(self.running_var).data[j];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var;
            self.acc_sum[j] = 0.0;
            self.acc_sumsq[j] = 0.0;
        }
        self.acc_rows = 0;
    }
}
