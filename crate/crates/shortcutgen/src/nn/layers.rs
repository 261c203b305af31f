//! Layer building blocks on top of the parameter store.
//!
//! Every layer holds plain `Tensor` views of its parameters. In trainable
//! mode those views share storage (and graph identity) with the store's
//! `Var`s; in frozen mode they are detached, so backprop never visits them
//! and nothing can update them.

use std::sync::Mutex;

use candle_core::{Tensor, Var};
use candle_nn::{Conv2dConfig, Module};

use super::{Init, ParamStore};
use crate::error::Result;

/// How normalization statistics are obtained during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Instantaneous batch statistics; optionally fold them into the running
    /// buffers (training mode).
    BatchStats { update_running: bool },
    /// Stored running statistics (inference mode).
    Running,
}

/// Builder that materializes layers either trainable or frozen.
pub struct NetBuilder<'a> {
    store: &'a mut ParamStore,
    frozen: bool,
}

impl<'a> NetBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, frozen: bool) -> Self {
        Self { store, frozen }
    }

    fn view(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        }
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Conv2d> {
        let fan_out = cout * kernel * kernel;
        let w = self.store.param(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::KaimingNormalFanOut { fan_out },
        )?;
        let b = if bias {
            let fan_in = cin * kernel * kernel;
            Some(self.store.param(
                &format!("{name}.bias"),
                &[cout],
                Init::UniformFanIn { fan_in },
            )?)
        } else {
            None
        };
        let cfg = Conv2dConfig {
            stride,
            padding,
            ..Default::default()
        };
        Ok(Conv2d(candle_nn::Conv2d::new(
            self.view(&w),
            b.as_ref().map(|b| self.view(b)),
            cfg,
        )))
    }

    /// Grouped convolution (depthwise when `groups == cin == cout`), no bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_grouped(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Conv2d> {
        let fan_out = cout * kernel * kernel / groups;
        let w = self.store.param(
            &format!("{name}.weight"),
            &[cout, cin / groups, kernel, kernel],
            Init::KaimingNormalFanOut { fan_out },
        )?;
        let cfg = Conv2dConfig {
            stride,
            padding,
            groups,
            ..Default::default()
        };
        Ok(Conv2d(candle_nn::Conv2d::new(self.view(&w), None, cfg)))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let w = self.store.param(
            &format!("{name}.weight"),
            &[dout, din],
            Init::UniformFanIn { fan_in: din },
        )?;
        let b = self.store.param(
            &format!("{name}.bias"),
            &[dout],
            Init::UniformFanIn { fan_in: din },
        )?;
        Ok(Linear(candle_nn::Linear::new(
            self.view(&w),
            Some(self.view(&b)),
        )))
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm2d> {
        let gamma = self
            .store
            .param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?;
        let beta = self
            .store
            .param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?;
        let device = self.store.device().clone();
        let dtype = self.store.dtype();
        Ok(BatchNorm2d {
            gamma: self.view(&gamma),
            beta: self.view(&beta),
            running_mean: Mutex::new(Tensor::zeros(channels, dtype, &device)?),
            running_var: Mutex::new(Tensor::ones(channels, dtype, &device)?),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        })
    }

    pub fn instance_norm(&mut self, name: &str, channels: usize) -> Result<InstanceNorm2d> {
        let gamma = self
            .store
            .param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?;
        let beta = self
            .store
            .param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?;
        Ok(InstanceNorm2d {
            gamma: self.view(&gamma),
            beta: self.view(&beta),
            eps: 1e-5,
            channels,
        })
    }
}

pub struct Conv2d(candle_nn::Conv2d);

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

pub struct Linear(candle_nn::Linear);

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Batch normalization with explicit statistic control.
///
/// Running buffers live outside the autograd graph; they are folded in under
/// a mutex so evaluation from multiple threads stays safe.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Mutex<Tensor>,
    running_var: Mutex<Tensor>,
    momentum: f64,
    eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    /// Folded normalization: one broadcast multiply and one broadcast add on
    /// the full tensor, with the statistics reduced on a `[C, N*H*W]` view.
    fn scale_shift(&self, x: &Tensor, mu: &Tensor, var: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let scale = self
            .gamma
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let shift = self.beta.sub(&mu.mul(&scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let (_n, c, _h, _w) = x.dims4()?;
        debug_assert_eq!(c, self.channels);
        match mode {
            NormMode::BatchStats { update_running } => {
                let flat = x.transpose(0, 1)?.flatten_from(1)?; // [C, N*H*W]
                let mu = flat.mean(1)?;
                let var = flat.sqr()?.mean(1)?.sub(&mu.sqr()?)?;
                if update_running {
                    let m = (x.elem_count() / c) as f64;
                    // unbiased variance for the running buffer, like torch
                    let unbiased = (var.detach() * (m / (m - 1.0).max(1.0)))?;
                    let mu = mu.detach();
                    let mut rm = self.running_mean.lock().expect("bn mean lock");
                    *rm = ((&*rm * (1.0 - self.momentum))? + (mu * self.momentum)?)?;
                    let mut rv = self.running_var.lock().expect("bn var lock");
                    *rv = ((&*rv * (1.0 - self.momentum))? + (unbiased * self.momentum)?)?;
                }
                self.scale_shift(x, &mu, &var)
            }
            NormMode::Running => {
                let rm = self.running_mean.lock().expect("bn mean lock").clone();
                let rv = self.running_var.lock().expect("bn var lock").clone();
                self.scale_shift(x, &rm, &rv)
            }
        }
    }
}

/// Instance normalization (per-sample, per-channel statistics). Statistics
/// never couple samples within a batch.
pub struct InstanceNorm2d {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
    channels: usize,
}

impl InstanceNorm2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _h, _w) = x.dims4()?;
        debug_assert_eq!(c, self.channels);
        let flat = x.flatten_from(2)?; // [N, C, H*W]
        let mu = flat.mean(2)?; // [N, C]
        let var = flat.sqr()?.mean(2)?.sub(&mu.sqr()?)?;
        let scale = self
            .gamma
            .reshape((1, c))?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?; // [N, C]
        let shift = self
            .beta
            .reshape((1, c))?
            .broadcast_sub(&mu.mul(&scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((n, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((n, c, 1, 1))?)?)
    }
}
