use rand::Rng;

use crate::error::Result;
use crate::tensor::{Mode, ParamBank, ParamId, Tape, Tensor, TensorId};

/// Three fully connected layers with ReLU hidden activations and dropout on
/// the hidden outputs.
#[derive(Debug, Clone)]
pub struct Classifier {
    layers: [(ParamId, ParamId); 3],
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout_p: f64,
}

impl Classifier {
    pub fn new(
        bank: &mut ParamBank,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [(input_dim, hidden), (hidden, hidden), (hidden, classes)];
        let layers = std::array::from_fn(|i| {
            let (d_in, d_out) = dims[i];
            let w = bank.param(
                format!("classifier.layer{i}.weight"),
                Tensor::glorot(d_in, d_out, rng),
            );
            let b = bank.param(
                format!("classifier.layer{i}.bias"),
                Tensor::zeros(vec![1, d_out]),
            );
            (w, b)
        });
        Classifier {
            layers,
            input_dim,
            hidden,
            classes,
            dropout_p,
        }
    }

    /// `final vector [D] -> logits [c]`; dropout active only in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bank: &ParamBank,
        x: TensorId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let mut h = tape.reshape(x, vec![1, self.input_dim])?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(bank, *w);
            let b = tape.param(bank, *b);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i < 2 {
                h = tape.relu(h);
                h = tape.dropout(h, self.dropout_p, mode, rng)?;
            }
        }
        tape.reshape(h, vec![self.classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = ParamBank::new();
        let clf = Classifier::new(&mut bank, 6, 4, 3, 0.5, &mut rng);
        for id in bank.trainable_ids() {
            bank.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![6], vec![1.0; 6]);
        let logits = clf
            .forward(&mut tape, &bank, x, Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(tape.data(logits), &[0.0, 0.0, 0.0]);
        let sm = tape.reshape(logits, vec![1, 3]).unwrap();
        let sm = tape.softmax_rows(sm).unwrap();
        for v in tape.data(sm) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = ParamBank::new();
        let clf = Classifier::new(&mut bank, 5, 8, 2, 0.5, &mut rng);
        let x0: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.7).collect();
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(vec![5], x0.clone());
            let l = clf.forward(&mut tape, &bank, x, Mode::Eval, &mut r).unwrap();
            tape.data(l).to_vec()
        };
        assert_eq!(run(100), run(999));
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = ParamBank::new();
        let clf = Classifier::new(&mut bank, 4, 5, 3, 0.0, &mut rng);
        let x0: Vec<f64> = (0..4).map(|i| (i as f64 * 0.9).sin()).collect();

        let loss = |clf: &Classifier, bank: &ParamBank| -> f64 {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let x = tape.constant(vec![4], x0.clone());
            let logits = clf.forward(&mut tape, bank, x, Mode::Train, &mut r).unwrap();
            let l = tape.cross_entropy(logits, 1).unwrap();
            tape.scalar_value(l)
        };
        {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let x = tape.constant(vec![4], x0.clone());
            let logits = clf
                .forward(&mut tape, &bank, x, Mode::Train, &mut r)
                .unwrap();
            let l = tape.cross_entropy(logits, 1).unwrap();
            tape.backward(l).unwrap();
            bank.zero_grads();
            tape.accumulate_into(&mut bank);
        }
        let report = check_gradients(&mut bank, |b| Ok(loss(&clf, b)), 1e-5).unwrap();
        assert!(report.max_rel_err() < 1e-5, "{}", report.max_rel_err());
    }
}
