//! Latent fixed data structures: projection of node features onto a fixed
//! latent topology, six structure variants, latent CNN/GNN aggregation,
//! element dropout and max-pool fusion.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, Mode, ParamBank, ParamId, Tape, Tensor, TensorId};

/// The latent structure the projected features live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfdsKind {
    /// 8×8 grid processed by a 2D CNN.
    Image8x8,
    /// Flat array processed by a 1D CNN.
    Array,
    /// Chain graph with a latent GNN.
    SequenceGraph,
    /// Cycle graph with a latent GNN.
    LoopGraph,
    /// Learnable adjacency (sigmoid-symmetrized) with a latent GNN.
    ParamSpatialGraph,
    /// Learnable spectral basis and per-layer filters.
    ParamSpectralGraph,
}

impl LfdsKind {
    pub fn all() -> [LfdsKind; 6] {
        [
            LfdsKind::Image8x8,
            LfdsKind::Array,
            LfdsKind::SequenceGraph,
            LfdsKind::LoopGraph,
            LfdsKind::ParamSpatialGraph,
            LfdsKind::ParamSpectralGraph,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LfdsKind::Image8x8 => "image",
            LfdsKind::Array => "array",
            LfdsKind::SequenceGraph => "sequence",
            LfdsKind::LoopGraph => "loop",
            LfdsKind::ParamSpatialGraph => "param-spatial",
            LfdsKind::ParamSpectralGraph => "param-spectral",
        }
    }

    pub fn parse(s: &str) -> Result<LfdsKind> {
        LfdsKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown head kind `{s}`; expected one of image, array, sequence, loop, param-spatial, param-spectral"
                ))
            })
    }

    pub fn default_m(&self) -> usize {
        match self {
            LfdsKind::Image8x8 => 64,
            _ => 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub kind: LfdsKind,
    pub m: usize,
    pub element_dropout: f64,
    /// Orthonormality regularizer weight for the spectral basis.
    pub lambda: f64,
    /// Start the spectral basis on the orthonormal manifold (QR of a random
    /// normal matrix) rather than raw standard normal.
    pub spectral_orthonormal_init: bool,
    /// Apply max-pool fusion before element dropout (the default ordering).
    pub fuse_before_dropout: bool,
}

impl HeadConfig {
    pub fn new(kind: LfdsKind) -> Self {
        HeadConfig {
            kind,
            m: kind.default_m(),
            element_dropout: 0.4,
            lambda: 1e-3,
            spectral_orthonormal_init: true,
            fuse_before_dropout: true,
        }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }
}

// ---------------------------------------------------------------------------
// projection and structure builders
// ---------------------------------------------------------------------------

/// Distributes the rows of `x` over the latent elements: row i of
/// `softmax(X·Wᵀ)` is the similarity profile of node i, and the output is
/// the similarity-weighted sum of outer products, in matrix form `Pᵀ·X`.
pub fn project(tape: &mut Tape, x: TensorId, w: TensorId) -> Result<TensorId> {
    if tape.shape(x).get(1) != tape.shape(w).get(1) {
        return Err(Error::ShapeMismatch {
            op: "project",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(w).to_vec(),
        });
    }
    let wt = tape.transpose(w)?;
    let sim = tape.matmul(x, wt)?;
    let p = tape.softmax_rows(sim)?;
    let pt = tape.transpose(p)?;
    tape.matmul(pt, x)
}

/// Dense adjacency of the predefined structures. Sequence (and the array
/// viewed as a graph) connects |i-j| = 1; the loop additionally closes the
/// ends.
pub fn fixed_adjacency(kind: LfdsKind, m: usize) -> Result<Vec<f64>> {
    let closed = match kind {
        LfdsKind::SequenceGraph | LfdsKind::Array => false,
        LfdsKind::LoopGraph => true,
        other => {
            return Err(Error::invalid(format!(
                "{} has no fixed adjacency",
                other.name()
            )))
        }
    };
    if m < 2 || (closed && m < 3) {
        return Err(Error::invalid(format!(
            "m = {m} too small for a {} structure",
            kind.name()
        )));
    }
    let mut a = vec![0.0; m * m];
    for i in 0..m - 1 {
        a[i * m + i + 1] = 1.0;
        a[(i + 1) * m + i] = 1.0;
    }
    if closed {
        a[m - 1] = 1.0;
        a[(m - 1) * m] = 1.0;
    }
    Ok(a)
}

/// `A' = σ(B + Bᵀ) - Diag(diag(σ(B + Bᵀ)))`: symmetric, zero diagonal,
/// entries in (0,1), differentiable through `B`.
pub fn learned_adjacency(tape: &mut Tape, b: TensorId) -> Result<TensorId> {
    let shape = tape.shape(b).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "learned_adjacency",
            lhs: shape,
            rhs: vec![],
        });
    }
    let m = shape[0];
    let bt = tape.transpose(b)?;
    let sym = tape.add(b, bt)?;
    let sig = tape.sigmoid(sym);
    let mut mask = vec![1.0; m * m];
    for i in 0..m {
        mask[i * m + i] = 0.0;
    }
    let mask = tape.constant(vec![m, m], mask);
    tape.mul_elem(sig, mask)
}

/// `λ‖U'ᵀU' - I‖²_F`, pulling the learned basis toward the orthonormal
/// manifold.
pub fn orthonormality_penalty(tape: &mut Tape, u: TensorId, lambda: f64) -> Result<TensorId> {
    let shape = tape.shape(u).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "orthonormality_penalty",
            lhs: shape,
            rhs: vec![],
        });
    }
    let m = shape[0];
    let ut = tape.transpose(u)?;
    let gram = tape.matmul(ut, u)?;
    let mut neg_identity = vec![0.0; m * m];
    for i in 0..m {
        neg_identity[i * m + i] = -1.0;
    }
    let neg_i = tape.constant(vec![m, m], neg_identity);
    let diff = tape.add(gram, neg_i)?;
    let sq = tape.mul_elem(diff, diff)?;
    let total = tape.sum(sq);
    let lam = tape.constant_scalar(lambda);
    tape.scale_by(lam, total)
}

/// Latent spatial convolution `bn(A'·relu(Y·Φ2') + relu(Y·Φ1'))`, for fixed
/// and learned adjacencies alike.
pub fn latent_spatial_conv(
    tape: &mut Tape,
    bank: &ParamBank,
    y: TensorId,
    a_prime: TensorId,
    phi1: TensorId,
    phi2: TensorId,
    bn: &mut BatchNorm,
    mode: Mode,
) -> Result<TensorId> {
    let self_term = tape.matmul(y, phi1)?;
    let self_term = tape.relu(self_term);
    let nbr = tape.matmul(y, phi2)?;
    let nbr = tape.relu(nbr);
    let agg = tape.matmul(a_prime, nbr)?;
    let summed = tape.add(agg, self_term)?;
    bn.forward(tape, bank, summed, mode)
}

/// Latent spectral convolution `bn(relu(U'·diag(Θ')·U'ᵀ·Y·Φ2') + relu(Y·Φ1'))`.
pub fn latent_spectral_conv(
    tape: &mut Tape,
    bank: &ParamBank,
    y: TensorId,
    u: TensorId,
    theta: TensorId,
    phi1: TensorId,
    phi2: TensorId,
    bn: &mut BatchNorm,
    mode: Mode,
) -> Result<TensorId> {
    let transformed = tape.matmul(y, phi2)?;
    let ut = tape.transpose(u)?;
    let spectral = tape.matmul(ut, transformed)?;
    let filtered = tape.mul_rows(spectral, theta)?;
    let back = tape.matmul(u, filtered)?;
    let branch = tape.relu(back);
    let self_term = tape.matmul(y, phi1)?;
    let self_term = tape.relu(self_term);
    let summed = tape.add(branch, self_term)?;
    bn.forward(tape, bank, summed, mode)
}

/// Row-granular inverted dropout on the latent signal.
pub fn element_dropout(
    tape: &mut Tape,
    y: TensorId,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<TensorId> {
    tape.row_dropout(y, p, mode, rng)
}

/// Mixes the global max feature into every latent element:
/// `y_i <- a1·y_i + a2·x_max`.
pub fn fuse_maxpool(
    tape: &mut Tape,
    y: TensorId,
    x_max: TensorId,
    a1: TensorId,
    a2: TensorId,
) -> Result<TensorId> {
    let (m, d) = match tape.shape(y) {
        [m, d] => (*m, *d),
        other => {
            return Err(Error::ShapeMismatch {
                op: "fuse_maxpool",
                lhs: other.to_vec(),
                rhs: tape.shape(x_max).to_vec(),
            })
        }
    };
    if tape.shape(x_max) != [d] {
        return Err(Error::ShapeMismatch {
            op: "fuse_maxpool",
            lhs: vec![m, d],
            rhs: tape.shape(x_max).to_vec(),
        });
    }
    let scaled_y = tape.scale_by(a1, y)?;
    let ones = tape.constant(vec![m], vec![1.0; m]);
    let broadcast = tape.outer(ones, x_max)?;
    let scaled_max = tape.scale_by(a2, broadcast)?;
    tape.add(scaled_y, scaled_max)
}

// ---------------------------------------------------------------------------
// latent layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum LatentLayer {
    Cnn2d {
        kernel: ParamId,
        bn: BatchNorm,
        side: usize,
    },
    Cnn1d {
        kernel: ParamId,
        bn: BatchNorm,
    },
    Gnn {
        phi1: ParamId,
        phi2: ParamId,
        bn: BatchNorm,
    },
    Spectral {
        phi1: ParamId,
        phi2: ParamId,
        theta: ParamId,
        bn: BatchNorm,
    },
}

impl LatentLayer {
    fn forward(
        &mut self,
        tape: &mut Tape,
        bank: &ParamBank,
        y: TensorId,
        structure: Option<TensorId>,
        mode: Mode,
    ) -> Result<TensorId> {
        match self {
            LatentLayer::Cnn2d { kernel, bn, side } => {
                let (m, d) = (tape.shape(y)[0], tape.shape(y)[1]);
                if m != *side * *side {
                    return Err(Error::ShapeMismatch {
                        op: "latent_cnn",
                        lhs: vec![m, d],
                        rhs: vec![*side, *side],
                    });
                }
                let img = tape.reshape(y, vec![*side, *side, d])?;
                let k = tape.param(bank, *kernel);
                let conv = tape.conv2d(img, k)?;
                let act = tape.relu(conv);
                let flat = tape.reshape(act, vec![m, d])?;
                bn.forward(tape, bank, flat, mode)
            }
            LatentLayer::Cnn1d { kernel, bn } => {
                let k = tape.param(bank, *kernel);
                let conv = tape.conv1d(y, k)?;
                let act = tape.relu(conv);
                bn.forward(tape, bank, act, mode)
            }
            LatentLayer::Gnn { phi1, phi2, bn } => {
                let a_prime = structure.expect("GNN latent layer needs an adjacency");
                let p1 = tape.param(bank, *phi1);
                let p2 = tape.param(bank, *phi2);
                latent_spatial_conv(tape, bank, y, a_prime, p1, p2, bn, mode)
            }
            LatentLayer::Spectral {
                phi1,
                phi2,
                theta,
                bn,
            } => {
                let u = structure.expect("spectral latent layer needs a basis");
                let p1 = tape.param(bank, *phi1);
                let p2 = tape.param(bank, *phi2);
                let th = tape.param(bank, *theta);
                latent_spectral_conv(tape, bank, y, u, th, p1, p2, bn, mode)
            }
        }
    }

    fn bn_mut(&mut self) -> &mut BatchNorm {
        match self {
            LatentLayer::Cnn2d { bn, .. }
            | LatentLayer::Cnn1d { bn, .. }
            | LatentLayer::Gnn { bn, .. }
            | LatentLayer::Spectral { bn, .. } => bn,
        }
    }
}

#[derive(Debug, Clone)]
enum Structure {
    /// Constant adjacency for sequence/loop structures.
    Fixed(Vec<f64>),
    /// No adjacency; the latent network is a CNN over grid/array positions.
    Grid,
    /// Learnable pre-adjacency B.
    Learned { b: ParamId },
    /// Learnable spectral basis U'.
    Spectral { u: ParamId },
}

/// One aggregation head: projection queries, latent structure, two latent
/// layers and fusion coefficients.
#[derive(Debug, Clone)]
pub struct LfdsHead {
    pub cfg: HeadConfig,
    pub d: usize,
    pub w: ParamId,
    pub a1_raw: ParamId,
    pub a2_raw: ParamId,
    structure: Structure,
    layers: Vec<LatentLayer>,
}

pub struct HeadOutput {
    pub y0: TensorId,
    pub y1: TensorId,
    pub y2: TensorId,
    /// concat of the two per-layer max readouts, length 2d.
    pub y: TensorId,
    /// concat of the backbone max readout and `y`.
    pub final_vec: TensorId,
}

impl LfdsHead {
    /// `d` is the backbone's last-layer width.
    pub fn new(bank: &mut ParamBank, cfg: HeadConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut cfg = cfg;
        if cfg.kind == LfdsKind::Image8x8 {
            cfg.m = 64;
        }
        if cfg.m < 2 {
            return Err(Error::invalid("latent structure needs m >= 2"));
        }
        if cfg.kind == LfdsKind::LoopGraph && cfg.m < 3 {
            return Err(Error::invalid("loop structure needs m >= 3"));
        }
        let m = cfg.m;
        let w = bank.param("head.W", Tensor::randn(vec![m, d], 1.0 / (d as f64).sqrt(), rng));
        // softplus(raw) = 1 at raw = ln(e - 1)
        let raw_one = (std::f64::consts::E - 1.0).ln();
        let a1_raw = bank.param("head.a1_raw", Tensor::scalar(raw_one));
        let a2_raw = bank.param("head.a2_raw", Tensor::scalar(raw_one));

        let structure = match cfg.kind {
            LfdsKind::Image8x8 | LfdsKind::Array => Structure::Grid,
            LfdsKind::SequenceGraph | LfdsKind::LoopGraph => {
                Structure::Fixed(fixed_adjacency(cfg.kind, m)?)
            }
            LfdsKind::ParamSpatialGraph => {
                let b = bank.param("head.B", Tensor::randn(vec![m, m], 0.1, rng));
                Structure::Learned { b }
            }
            LfdsKind::ParamSpectralGraph => {
                let init = if cfg.spectral_orthonormal_init {
                    random_orthonormal(m, rng)
                } else {
                    Tensor::randn(vec![m, m], 1.0, rng)
                };
                let u = bank.param("head.U", init);
                Structure::Spectral { u }
            }
        };

        let mut layers = Vec::with_capacity(2);
        for i in 0..2 {
            let prefix = format!("head.layer{i}");
            let bn = BatchNorm::new(bank, &format!("{prefix}.bn"), d);
            let layer = match cfg.kind {
                LfdsKind::Image8x8 => LatentLayer::Cnn2d {
                    kernel: bank.param(
                        format!("{prefix}.kernel"),
                        Tensor::glorot_fan(vec![3, 3, d, d], 9 * d, 9 * d, rng),
                    ),
                    bn,
                    side: 8,
                },
                LfdsKind::Array => LatentLayer::Cnn1d {
                    kernel: bank.param(
                        format!("{prefix}.kernel"),
                        Tensor::glorot_fan(vec![3, d, d], 3 * d, 3 * d, rng),
                    ),
                    bn,
                },
                LfdsKind::SequenceGraph | LfdsKind::LoopGraph | LfdsKind::ParamSpatialGraph => {
                    LatentLayer::Gnn {
                        phi1: bank.param(format!("{prefix}.phi1"), Tensor::glorot(d, d, rng)),
                        phi2: bank.param(format!("{prefix}.phi2"), Tensor::glorot(d, d, rng)),
                        bn,
                    }
                }
                LfdsKind::ParamSpectralGraph => LatentLayer::Spectral {
                    phi1: bank.param(format!("{prefix}.phi1"), Tensor::glorot(d, d, rng)),
                    phi2: bank.param(format!("{prefix}.phi2"), Tensor::glorot(d, d, rng)),
                    theta: bank.param(
                        format!("{prefix}.theta"),
                        Tensor::new(vec![m], vec![1.0; m]).expect("theta shape"),
                    ),
                    bn,
                },
            };
            layers.push(layer);
        }

        Ok(LfdsHead {
            cfg,
            d,
            w,
            a1_raw,
            a2_raw,
            structure,
            layers,
        })
    }

    pub fn kind(&self) -> LfdsKind {
        self.cfg.kind
    }

    pub fn spectral_basis(&self) -> Option<ParamId> {
        match self.structure {
            Structure::Spectral { u } => Some(u),
            _ => None,
        }
    }

    pub fn learned_pre_adjacency(&self) -> Option<ParamId> {
        match self.structure {
            Structure::Learned { b } => Some(b),
            _ => None,
        }
    }

    /// Orthonormality penalty term, present only for the spectral head.
    pub fn penalty(&self, tape: &mut Tape, bank: &ParamBank) -> Result<Option<TensorId>> {
        match self.structure {
            Structure::Spectral { u } => {
                let uid = tape.param(bank, u);
                Ok(Some(orthonormality_penalty(tape, uid, self.cfg.lambda)?))
            }
            _ => Ok(None),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bank: &ParamBank,
        backbone_out: &BackboneOutput,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<HeadOutput> {
        let x_local = *backbone_out
            .per_layer
            .last()
            .expect("backbone has at least one layer");
        let w = tape.param(bank, self.w);
        let projected = project(tape, x_local, w)?;

        let x_max_local = tape.rowwise_max(x_local)?;
        let a1_raw = tape.param(bank, self.a1_raw);
        let a2_raw = tape.param(bank, self.a2_raw);
        let a1 = tape.softplus(a1_raw);
        let a2 = tape.softplus(a2_raw);

        let y0 = if self.cfg.fuse_before_dropout {
            let fused = fuse_maxpool(tape, projected, x_max_local, a1, a2)?;
            element_dropout(tape, fused, self.cfg.element_dropout, mode, rng)?
        } else {
            let dropped = element_dropout(tape, projected, self.cfg.element_dropout, mode, rng)?;
            fuse_maxpool(tape, dropped, x_max_local, a1, a2)?
        };

        let structure = match &self.structure {
            Structure::Fixed(a) => {
                Some(tape.constant(vec![self.cfg.m, self.cfg.m], a.clone()))
            }
            Structure::Grid => None,
            Structure::Learned { b } => {
                let bid = tape.param(bank, *b);
                Some(learned_adjacency(tape, bid)?)
            }
            Structure::Spectral { u } => Some(tape.param(bank, *u)),
        };

        let y1 = self.layers[0].forward(tape, bank, y0, structure, mode)?;
        let y2 = self.layers[1].forward(tape, bank, y1, structure, mode)?;

        let y1_read = tape.rowwise_max(y1)?;
        let y2_read = tape.rowwise_max(y2)?;
        let y = tape.concat_vec(y1_read, y2_read)?;
        let final_vec = tape.concat_vec(backbone_out.x_max, y)?;
        Ok(HeadOutput {
            y0,
            y1,
            y2,
            y,
            final_vec,
        })
    }

    pub fn commit_running_stats(&mut self, bank: &mut ParamBank) {
        for layer in &mut self.layers {
            layer.bn_mut().commit_running_stats(bank);
        }
    }

    #[cfg(test)]
    pub(crate) fn layer_bn_eps(&mut self, eps: f64) {
        for layer in &mut self.layers {
            layer.bn_mut().eps = eps;
        }
    }
}

/// Global max-pool baseline: the backbone readout alone.
pub fn max_pool_baseline(backbone_out: &BackboneOutput) -> TensorId {
    backbone_out.x_max
}

/// QR-based random orthonormal matrix.
pub fn random_orthonormal(m: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Tensor::randn(vec![m, m], 1.0, rng);
    let mat = nalgebra::DMatrix::from_row_slice(m, m, &normal.data);
    let q = mat.qr().q();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            data[i * m + j] = q[(i, j)];
        }
    }
    Tensor::new(vec![m, m], data).expect("square Q")
}

/// Derives an rng for dropout that is reproducible per (seed, sample).
pub fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::data::derive_seed(seed, stream))
}
