//! Adam with moments that can be checkpointed, and the step-halving learning
//! rate schedule.

use tch::{nn, Kind, Tensor};

use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    params: Vec<(String, Tensor)>,
    lr_scale: Vec<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Optimizes every trainable variable of `vs`.
    pub fn new(vs: &nn::VarStore, lr: f64, betas: (f64, f64)) -> Self {
        let mut params: Vec<(String, Tensor)> = vs
            .variables()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            lr,
            betas,
            eps: 1e-8,
            step: 0,
            lr_scale: vec![1.0; params.len()],
            params,
            m,
            v,
        }
    }

    /// Per-parameter learning-rate multipliers, keyed by variable name.
    pub fn with_lr_scale(mut self, scale: impl Fn(&str) -> f64) -> Self {
        self.lr_scale = self.params.iter().map(|(n, _)| scale(n)).collect();
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    pub fn step(&mut self) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        tch::no_grad(|| {
            let groups = self.params.iter_mut().zip(&self.lr_scale);
            for ((((_, p), scale), m), v) in groups.zip(&mut self.m).zip(&mut self.v) {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                m.copy_(&(&*m * b1 + &g * (1.0 - b1)));
                v.copy_(&(&*v * b2 + g.square() * (1.0 - b2)));
                let update = (&*m / c1) / ((&*v / c2).sqrt() + self.eps) * (self.lr * scale);
                let _ = p.f_sub_(&update).expect("in-place parameter update");
            }
        });
    }

    /// Adds moments and the step counter under `opt.<group>.`.
    pub fn save_into(&self, bundle: &mut CheckpointBundle, group: &str) -> Result<()> {
        for ((name, _), (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            bundle.insert_tensor(&format!("opt.{group}.m.{name}"), m)?;
            bundle.insert_tensor(&format!("opt.{group}.v.{name}"), v)?;
        }
        bundle.insert_tensor(&format!("opt.{group}.step"), &Tensor::from(self.step as f32))?;
        Ok(())
    }

    pub fn load_from(&mut self, bundle: &CheckpointBundle, group: &str) -> Result<()> {
        let step = f64::try_from(bundle.get_tensor(&format!("opt.{group}.step"))?)?;
        let mut staged = Vec::new();
        for (name, p) in &self.params {
            let m = bundle.get_tensor(&format!("opt.{group}.m.{name}"))?;
            let v = bundle.get_tensor(&format!("opt.{group}.v.{name}"))?;
            if m.size() != p.size() || v.size() != p.size() {
                return Err(Error::Shape(format!("optimizer state for {name} has the wrong shape")));
            }
            staged.push((m, v));
        }
        tch::no_grad(|| {
            for ((m, v), (sm, sv)) in self.m.iter_mut().zip(self.v.iter_mut()).zip(staged) {
                m.copy_(&sm.to_kind(Kind::Float));
                v.copy_(&sv.to_kind(Kind::Float));
            }
        });
        self.step = step as u64;
        Ok(())
    }
}

/// Milestones used by the reference schedule over a 20k-iteration run.
pub const REFERENCE_MILESTONES: [u64; 3] = [5000, 10000, 15000];
pub const REFERENCE_ITERATIONS: u64 = 20000;

/// Reference milestones rescaled to a budget of `total` iterations.
pub fn scaled_milestones(total: u64) -> Vec<u64> {
    let mut out: Vec<u64> = REFERENCE_MILESTONES
        .iter()
        .map(|&m| (m as u128 * total as u128 / REFERENCE_ITERATIONS as u128) as u64)
        .filter(|&m| m > 0 && m < total)
        .collect();
    out.dedup();
    out
}

/// Base rate halved once for every milestone already reached.
pub fn lr_at(base: f64, milestones: &[u64], iteration: u64) -> f64 {
    let halvings = milestones.iter().filter(|&&m| iteration >= m).count();
    base * 0.5f64.powi(halvings as i32)
}
