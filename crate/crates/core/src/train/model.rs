use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classifier::Classifier;
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::data::GraphSample;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, LfdsHead, LfdsKind};
use crate::tensor::{Mode, ParamBank, Tape, TensorId};

/// Everything needed to rebuild a model deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub backbone_dims: Vec<usize>,
    pub head: Option<HeadSpec>,
    pub classifier_hidden: usize,
    pub dropout_classifier: f64,
    pub dropout_input: f64,
    pub dropout_element: f64,
    pub normalize_adjacency: bool,
    pub fuse_before_dropout: bool,
    pub spectral_orthonormal_init: bool,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: LfdsKind,
    pub m: usize,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, input_dim: usize, num_classes: usize) -> Self {
        let head = run.head.map(|kind| HeadSpec {
            kind,
            m: run.m.unwrap_or_else(|| kind.default_m()),
        });
        ModelConfig {
            input_dim,
            num_classes,
            backbone_dims: run.backbone_dims.clone(),
            head,
            classifier_hidden: run.classifier_hidden,
            dropout_classifier: run.dropout_classifier,
            dropout_input: run.dropout_input,
            dropout_element: run.dropout_element,
            normalize_adjacency: run.normalize_adjacency,
            fuse_before_dropout: run.fuse_before_dropout,
            spectral_orthonormal_init: run.spectral_orthonormal_init,
            lambda: run.lambda,
        }
    }

    /// Length of the representation fed to the classifier: the backbone
    /// readout plus, with a head, the two latent readouts.
    pub fn final_dim(&self) -> usize {
        let backbone: usize = self.backbone_dims.iter().sum();
        match self.head {
            Some(_) => backbone + 2 * self.backbone_dims.last().unwrap(),
            None => backbone,
        }
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        let dims = self
            .backbone_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv = vec![
            ("input_dim".to_string(), self.input_dim.to_string()),
            ("num_classes".to_string(), self.num_classes.to_string()),
            ("backbone.dims".to_string(), dims),
            (
                "classifier.hidden".to_string(),
                self.classifier_hidden.to_string(),
            ),
            (
                "dropout.classifier".to_string(),
                self.dropout_classifier.to_string(),
            ),
            ("dropout.input".to_string(), self.dropout_input.to_string()),
            (
                "dropout.element".to_string(),
                self.dropout_element.to_string(),
            ),
            (
                "backbone.normalize_adjacency".to_string(),
                self.normalize_adjacency.to_string(),
            ),
            (
                "head.fuse_before_dropout".to_string(),
                self.fuse_before_dropout.to_string(),
            ),
            (
                "head.spectral_orthonormal_init".to_string(),
                self.spectral_orthonormal_init.to_string(),
            ),
            ("lambda".to_string(), self.lambda.to_string()),
        ];
        match self.head {
            Some(spec) => {
                kv.push(("head.kind".to_string(), spec.kind.name().to_string()));
                kv.push(("head.m".to_string(), spec.m.to_string()));
            }
            None => kv.push(("head.kind".to_string(), "max-pool".to_string())),
        }
        kv
    }

    pub(crate) fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Corrupt {
                    what: "checkpoint header",
                    msg: format!("missing key `{key}`"),
                })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Corrupt {
                what: "checkpoint header",
                msg: format!("bad value for `{key}`"),
            })
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Corrupt {
                what: "checkpoint header",
                msg: format!("bad value for `{key}`"),
            })
        };
        let head = match get("head.kind")? {
            "max-pool" => None,
            other => Some(HeadSpec {
                kind: LfdsKind::parse(other)?,
                m: parse_usize("head.m")?,
            }),
        };
        Ok(ModelConfig {
            input_dim: parse_usize("input_dim")?,
            num_classes: parse_usize("num_classes")?,
            backbone_dims: get("backbone.dims")?
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| Error::Corrupt {
                        what: "checkpoint header",
                        msg: "bad backbone.dims".into(),
                    })
                })
                .collect::<Result<Vec<usize>>>()?,
            head,
            classifier_hidden: parse_usize("classifier.hidden")?,
            dropout_classifier: parse_f64("dropout.classifier")?,
            dropout_input: parse_f64("dropout.input")?,
            dropout_element: parse_f64("dropout.element")?,
            normalize_adjacency: get("backbone.normalize_adjacency")? == "true",
            fuse_before_dropout: get("head.fuse_before_dropout")? == "true",
            spectral_orthonormal_init: get("head.spectral_orthonormal_init")? == "true",
            lambda: parse_f64("lambda")?,
        })
    }
}

pub struct ForwardOut {
    pub logits: TensorId,
    pub final_vec: TensorId,
}

pub struct LossOut {
    pub total: TensorId,
    pub logits: TensorId,
    pub ce: f64,
    pub penalty: f64,
}

/// Backbone + optional LFDS head + classifier over one parameter bank.
pub struct GraphClassifier {
    pub cfg: ModelConfig,
    pub bank: ParamBank,
    pub backbone: Backbone,
    pub head: Option<LfdsHead>,
    pub classifier: Classifier,
}

impl GraphClassifier {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut bank = ParamBank::new();
        let backbone_cfg = BackboneConfig {
            input_dim: cfg.input_dim,
            layer_dims: cfg.backbone_dims.clone(),
            input_dropout: cfg.dropout_input,
            normalize_adjacency: cfg.normalize_adjacency,
        };
        let backbone = Backbone::new(&mut bank, backbone_cfg, &mut rng);
        let head = match cfg.head {
            Some(spec) => {
                let head_cfg = HeadConfig {
                    kind: spec.kind,
                    m: spec.m,
                    element_dropout: cfg.dropout_element,
                    lambda: cfg.lambda,
                    spectral_orthonormal_init: cfg.spectral_orthonormal_init,
                    fuse_before_dropout: cfg.fuse_before_dropout,
                };
                Some(LfdsHead::new(
                    &mut bank,
                    head_cfg,
                    *cfg.backbone_dims.last().unwrap(),
                    &mut rng,
                )?)
            }
            None => None,
        };
        let classifier = Classifier::new(
            &mut bank,
            cfg.final_dim(),
            cfg.classifier_hidden,
            cfg.num_classes,
            cfg.dropout_classifier,
            &mut rng,
        );
        Ok(GraphClassifier {
            cfg,
            bank,
            backbone,
            head,
            classifier,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        sample: &GraphSample,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOut> {
        let backbone_out = self
            .backbone
            .forward(tape, &self.bank, sample, mode, rng)?;
        let final_vec = match self.head.as_mut() {
            Some(head) => {
                head.forward(tape, &self.bank, &backbone_out, mode, rng)?
                    .final_vec
            }
            None => backbone_out.x_max,
        };
        let logits = self
            .classifier
            .forward(tape, &self.bank, final_vec, mode, rng)?;
        Ok(ForwardOut { logits, final_vec })
    }

    /// Cross entropy plus the orthonormality penalty when a spectral head is
    /// active.
    pub fn loss(
        &mut self,
        tape: &mut Tape,
        sample: &GraphSample,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOut> {
        let out = self.forward(tape, sample, mode, rng)?;
        let ce = tape.cross_entropy(out.logits, sample.label)?;
        let ce_value = tape.scalar_value(ce);
        let (total, penalty_value) = match self.head.as_ref() {
            Some(head) => match head.penalty(tape, &self.bank)? {
                Some(penalty) => {
                    let penalty_value = tape.scalar_value(penalty);
                    (tape.add(ce, penalty)?, penalty_value)
                }
                None => (ce, 0.0),
            },
            None => (ce, 0.0),
        };
        Ok(LossOut {
            total,
            logits: out.logits,
            ce: ce_value,
            penalty: penalty_value,
        })
    }

    /// Eval-mode argmax prediction.
    pub fn predict(&mut self, sample: &GraphSample) -> Result<usize> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, sample, Mode::Eval, &mut rng)?;
        let logits = tape.data(out.logits);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn commit_running_stats(&mut self) {
        self.backbone.commit_running_stats(&mut self.bank);
        if let Some(head) = self.head.as_mut() {
            head.commit_running_stats(&mut self.bank);
        }
    }

    /// `‖U'ᵀU' - I‖_F` of the spectral basis, if the head has one.
    pub fn basis_frobenius_error(&self) -> Option<f64> {
        let head = self.head.as_ref()?;
        let u = head.spectral_basis()?;
        let t = &self.bank.get(u);
        let m = t.shape[0];
        let mut err = 0.0;
        for i in 0..m {
            for j in 0..m {
                let mut dot = 0.0;
                for k in 0..m {
                    dot += t.data[k * m + i] * t.data[k * m + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                err += (dot - target) * (dot - target);
            }
        }
        Some(err.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_separable;

    fn tiny_cfg(head: Option<HeadSpec>) -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            num_classes: 2,
            backbone_dims: vec![4, 4, 4],
            head,
            classifier_hidden: 6,
            dropout_classifier: 0.5,
            dropout_input: 0.2,
            dropout_element: 0.4,
            normalize_adjacency: false,
            fuse_before_dropout: true,
            spectral_orthonormal_init: true,
            lambda: 1e-3,
        }
    }

    #[test]
    fn final_dim_accounts_for_head() {
        let baseline = tiny_cfg(None);
        assert_eq!(baseline.final_dim(), 12);
        let with_head = tiny_cfg(Some(HeadSpec {
            kind: LfdsKind::LoopGraph,
            m: 4,
        }));
        assert_eq!(with_head.final_dim(), 20);
    }

    #[test]
    fn model_config_kv_round_trip() {
        for head in [
            None,
            Some(HeadSpec {
                kind: LfdsKind::ParamSpectralGraph,
                m: 8,
            }),
        ] {
            let cfg = tiny_cfg(head);
            let kv = cfg.to_kv();
            let back = ModelConfig::from_kv(&kv).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn spectral_loss_includes_penalty_only_when_nonorthonormal() {
        let mut cfg = tiny_cfg(Some(HeadSpec {
            kind: LfdsKind::ParamSpectralGraph,
            m: 4,
        }));
        cfg.lambda = 1.0;
        let mut model = GraphClassifier::new(cfg, 3).unwrap();
        let ds = generate_separable(1, 4);
        let g = &ds.samples[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        // orthonormal init: penalty is fp-tiny, total ~ ce
        let mut tape = Tape::new();
        let out = model.loss(&mut tape, g, Mode::Eval, &mut rng).unwrap();
        assert!(out.penalty.abs() < 1e-20);
        assert!((tape.scalar_value(out.total) - out.ce - out.penalty).abs() < 1e-12);

        // overwrite U with 2I: penalty = lambda * m * 9
        let u = model.head.as_ref().unwrap().spectral_basis().unwrap();
        let m = 4;
        let data = &mut model.bank.get_mut(u).data;
        data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            data[i * m + i] = 2.0;
        }
        let mut tape = Tape::new();
        let out = model.loss(&mut tape, g, Mode::Eval, &mut rng).unwrap();
        assert!((out.penalty - 36.0).abs() < 1e-9, "penalty {}", out.penalty);
    }

    #[test]
    fn non_spectral_loss_is_plain_cross_entropy() {
        let cfg = tiny_cfg(Some(HeadSpec {
            kind: LfdsKind::LoopGraph,
            m: 4,
        }));
        let mut model = GraphClassifier::new(cfg, 5).unwrap();
        let ds = generate_separable(1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = model
            .loss(&mut tape, &ds.samples[0], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(out.penalty, 0.0);
        assert_eq!(tape.scalar_value(out.total), out.ce);
    }

    #[test]
    fn lambda_zero_spectral_loss_equals_cross_entropy() {
        let mut cfg = tiny_cfg(Some(HeadSpec {
            kind: LfdsKind::ParamSpectralGraph,
            m: 4,
        }));
        cfg.lambda = 0.0;
        cfg.spectral_orthonormal_init = false;
        let mut model = GraphClassifier::new(cfg, 7).unwrap();
        let ds = generate_separable(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = model
            .loss(&mut tape, &ds.samples[0], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(out.penalty, 0.0);
        assert_eq!(tape.scalar_value(out.total), out.ce);
    }
}
