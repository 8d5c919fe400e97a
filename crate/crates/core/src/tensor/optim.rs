//! AdamW with decoupled weight decay and per-group gradient ascent.
//!
//! Parameter groups are registered once; each training step then feeds every
//! registered slot its current values and gradient in the same order. Groups
//! flagged `maximize` ascend, which is how the Lagrangian multipliers are
//! driven against the rest of the trainable parameters.

/// Per-group optimizer settings.
#[derive(Debug, Clone)]
pub struct GroupCfg {
    pub lr: f32,
    pub weight_decay: f32,
    pub maximize: bool,
    /// Linear decay of the learning rate to zero over this many steps.
    pub linear_decay_steps: Option<u64>,
}

impl GroupCfg {
    pub fn minimize(lr: f32) -> Self {
        GroupCfg { lr, weight_decay: 0.0, maximize: false, linear_decay_steps: None }
    }

    pub fn maximize(lr: f32) -> Self {
        GroupCfg { lr, weight_decay: 0.0, maximize: true, linear_decay_steps: None }
    }

    pub fn with_linear_decay(mut self, total_steps: u64) -> Self {
        self.linear_decay_steps = Some(total_steps);
        self
    }
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

struct Group {
    cfg: GroupCfg,
    slots: Vec<AdamState>,
}

/// Handle for one registered parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamSlot {
    group: usize,
    index: usize,
}

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    groups: Vec<Group>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, groups: Vec::new() }
    }

    pub fn add_group(&mut self, cfg: GroupCfg) -> usize {
        self.groups.push(Group { cfg, slots: Vec::new() });
        self.groups.len() - 1
    }

    pub fn register(&mut self, group: usize, len: usize) -> ParamSlot {
        let g = &mut self.groups[group];
        g.slots.push(AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 });
        ParamSlot { group, index: g.slots.len() - 1 }
    }

    /// Effective learning rate of a group at a global step.
    pub fn lr_at(&self, group: usize, global_step: u64) -> f32 {
        let cfg = &self.groups[group].cfg;
        match cfg.linear_decay_steps {
            Some(total) if total > 0 => {
                let frac = 1.0 - (global_step.min(total) as f32 / total as f32);
                cfg.lr * frac
            }
            _ => cfg.lr,
        }
    }

    /// One decoupled-weight-decay update for a single parameter.
    ///
    /// `grad_scale` is applied before the moment updates (global-norm
    /// clipping is expressed this way). Zero gradients with zero weight decay
    /// leave the values untouched.
    pub fn step(&mut self, slot: ParamSlot, values: &mut [f32], grad: &[f32], global_step: u64, grad_scale: f32) {
        debug_assert_eq!(values.len(), grad.len());
        let lr = self.lr_at(slot.group, global_step);
        let g = &mut self.groups[slot.group];
        let sign = if g.cfg.maximize { -1.0 } else { 1.0 };
        let wd = g.cfg.weight_decay;
        let st = &mut g.slots[slot.index];
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        for i in 0..values.len() {
            let gi = sign * grad_scale * grad[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            if wd != 0.0 {
                values[i] -= lr * wd * values[i];
            }
            values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Euclidean norm over a set of gradient buffers.
pub fn global_grad_norm<'a>(grads: impl Iterator<Item = &'a [f32]>) -> f32 {
    let mut ss = 0.0f64;
    for g in grads {
        for &v in g {
            ss += (v as f64) * (v as f64);
        }
    }
    (ss as f32).sqrt()
}

/// Scale factor that caps the global norm at `max_norm`.
pub fn clip_scale(norm: f32, max_norm: f32) -> f32 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut opt = AdamW::new();
        let g = opt.add_group(GroupCfg::minimize(0.1));
        let slot = opt.register(g, 3);
        let mut w = vec![1.0, -2.0, 0.5];
        let orig = w.clone();
        opt.step(slot, &mut w, &[0.0, 0.0, 0.0], 0, 1.0);
        assert_eq!(w, orig);
    }

    #[test]
    fn descends_quadratic() {
        // f(w) = w^2, grad = 2w; one step from w=1 must decrease w
        let mut opt = AdamW::new();
        let g = opt.add_group(GroupCfg::minimize(0.1));
        let slot = opt.register(g, 1);
        let mut w = vec![1.0];
        opt.step(slot, &mut w, &[2.0], 0, 1.0);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn maximize_group_ascends() {
        // f(lambda) = lambda * c with c > 0; ascent must increase lambda
        let mut opt = AdamW::new();
        let g = opt.add_group(GroupCfg::maximize(0.05));
        let slot = opt.register(g, 1);
        let mut lam = vec![0.0];
        opt.step(slot, &mut lam, &[0.7], 0, 1.0);
        assert!(lam[0] > 0.0);
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let mut opt = AdamW::new();
        let g = opt.add_group(GroupCfg::minimize(1e-2).with_linear_decay(100));
        assert_eq!(opt.lr_at(g, 0), 1e-2);
        assert!((opt.lr_at(g, 50) - 5e-3).abs() < 1e-9);
        assert_eq!(opt.lr_at(g, 100), 0.0);
        assert_eq!(opt.lr_at(g, 200), 0.0);
    }

    #[test]
    fn clip_scale_caps_norm() {
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        let s = clip_scale(4.0, 1.0);
        assert!((s - 0.25).abs() < 1e-7);
    }
}
