use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global L2 norm exceeds this value (0 disables).
    pub grad_clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
        }
    }
}

/// Global L2 norm over all present gradients.
pub fn global_grad_norm(grads: &[Option<&[f32]>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    /// One buffer per parameter, same length.
    pub velocity: Vec<Vec<f32>>,
    pub step: usize,
    /// Learning rate used by the most recent step.
    pub lr: f64,
    pub rng: Rng64,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, rng: Rng64) -> Self {
        let velocity = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        TrainState {
            params,
            velocity,
            step: 0,
            lr: 0.0,
            rng,
        }
    }
}

/// `v ← μv + g + λw` (λ = 0 for parameters flagged as non-decaying),
/// `w ← w − lr·v`. Missing gradients count as zero. When `grad_clip > 0` and
/// the global gradient norm exceeds it, `g` is scaled down to that norm first.
/// Returns the unclipped global norm.
pub fn sgd_step(state: &mut TrainState, grads: &[Option<&[f32]>], cfg: SgdConfig) -> f64 {
    debug_assert_eq!(grads.len(), state.params.len());
    let norm = global_grad_norm(grads);
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        (cfg.grad_clip / norm) as f32
    } else {
        1.0
    };
    let ids: Vec<ParamId> = state.params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let decay = if state.params.decays(id) { cfg.weight_decay as f32 } else { 0.0 };
        let v = &mut state.velocity[id.index()];
        let w = state.params.get_mut(id).data_mut();
        debug_assert_eq!(v.len(), w.len());
        let (mu, lr) = (cfg.momentum as f32, cfg.lr as f32);
        for i in 0..w.len() {
            let gi = g.map_or(0.0, |g| g[i] * scale);
            v[i] = mu * v[i] + gi + decay * w[i];
            w[i] -= lr * v[i];
        }
    }
    state.step += 1;
    state.lr = cfg.lr;
    norm
}
