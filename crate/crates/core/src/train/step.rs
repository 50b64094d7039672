use log::warn;
use ndarray::Array2;

use super::{StepLog, StepReport, TargetAudit, TrainState, Trainer};
use crate::data::{assemble_triplet_with_roi, Role, TripletSample};
use crate::loss::{
    gan_discriminator_grads, gan_generator_grad, gan_losses, l1_grad, l1_loss, roi_loss, roi_loss_grad, total_loss,
    triplet_grads, triplet_loss, vq_loss_grads, vq_loss_values, LossParts, PerceptualDistance,
};
use crate::model::{nearest_code, ModelParams};
use crate::nn::{Tape, Tensor};
use crate::seed::rng_for;
use crate::{Error, Image, Mask, Result};

struct PairOut {
    pixel: f64,
    perc: f64,
    vq: f64,
    gan_g: f64,
    gan_d: f64,
    enc_tape: Tape,
    g_ze: Tensor,
    embedding: Vec<f32>,
    indices: Vec<usize>,
}

/// Gradients and losses of one anchor's triplet.
pub(super) struct AnchorOut {
    pub generator: Vec<f32>,
    pub discriminator: Vec<f32>,
    pub parts: LossParts,
    pub gan_d: f64,
    pub audit: Vec<TargetAudit>,
    pub indices: Vec<usize>,
}

fn to_array(t: &Tensor) -> Array2<f32> {
    Array2::from_shape_vec((t.h, t.w), t.data.clone()).expect("single-channel map")
}

fn from_array(a: &Array2<f32>) -> Tensor {
    Tensor::from_image(a)
}

fn pair_pass(
    tr: &Trainer,
    params: &ModelParams,
    input: &Image,
    target: &Image,
    roi: Option<&Mask>,
    gan: bool,
    grad: &mut [f32],
    dgrad: &mut [f32],
) -> Result<PairOut> {
    let model = &tr.model;
    let w = &tr.config.weights;
    let (enc_r, cb_r, dec_r) = (model.encoder_range(), model.codebook_range(), model.decoder_range());
    let gen = &params.generator;

    let (ze, enc_tape) = model.encoder_net().forward_tape(&gen[enc_r], Tensor::from_image(input));
    let d = ze.c;
    let n = ze.h * ze.w;
    let cb = &gen[cb_r.clone()];
    let mut zq = Tensor::zeros(d, ze.h, ze.w);
    let mut indices = Vec::with_capacity(n);
    let mut z = vec![0.0f32; d];
    for pos in 0..n {
        for (k, v) in z.iter_mut().enumerate() {
            *v = ze.data[k * n + pos];
        }
        let m = nearest_code(&z, cb, d);
        for k in 0..d {
            zq.data[k * n + pos] = cb[m * d + k];
        }
        indices.push(m);
    }

    let (xhat_t, dec_tape) = model.decoder_net().forward_tape(&gen[dec_r.clone()], zq.clone());
    let xhat = xhat_t.to_image();

    let (pixel, mut g) = if tr.config.ablation.uses_roi() {
        let empty;
        let mask = match roi {
            Some(m) => m,
            None => {
                empty = Mask::from_elem(target.dim(), false);
                &empty
            }
        };
        (
            roi_loss(target, &xhat, mask, w.alpha_roi)?,
            roi_loss_grad(target, &xhat, mask, w.alpha_roi)?,
        )
    } else {
        let mut g = l1_grad(target, &xhat)?;
        g.mapv_inplace(|v| v * w.lambda_l1 as f32);
        (w.lambda_l1 * l1_loss(target, &xhat)?, g)
    };

    let mut perc = 0.0;
    if w.lambda_perc > 0.0 {
        let (p, pg) = tr.perceptual.distance_grad(target, &xhat)?;
        perc = p;
        g.scaled_add(w.lambda_perc as f32, &pg);
    }

    let (mut gan_g, mut gan_d) = (0.0, 0.0);
    if gan {
        let disc = model.discriminator_net();
        let dp = &params.discriminator;
        let (fake_t, fake_tape) = disc.forward_tape(dp, Tensor::from_image(&xhat));
        let (real_t, real_tape) = disc.forward_tape(dp, Tensor::from_image(target));
        let (fake, real) = (to_array(&fake_t), to_array(&real_t));
        let losses = gan_losses(&real, &fake)?;
        gan_g = losses.generator;
        gan_d = losses.discriminator;
        if w.lambda_gan > 0.0 {
            let mut gg = gan_generator_grad(&fake);
            gg.mapv_inplace(|v| v * w.lambda_gan as f32);
            let gx = disc.backward(dp, fake_tape, from_array(&gg), None);
            g += &gx.to_image();
        }
        let (gr, gf) = gan_discriminator_grads(&real, &fake)?;
        disc.backward(dp, real_tape, from_array(&gr), Some(dgrad));
        let (_, detached_tape) = disc.forward_tape(dp, Tensor::from_image(&xhat));
        disc.backward(dp, detached_tape, from_array(&gf), Some(dgrad));
    }

    let mut g_ze = model
        .decoder_net()
        .backward(&gen[dec_r.clone()], dec_tape, Tensor::from_image(&g), Some(&mut grad[dec_r]));

    let vq = vq_loss_values(&ze.data, &zq.data, w.beta_commit)?;
    let vg = vq_loss_grads(&ze.data, &zq.data, w.beta_commit)?;
    let lvq = w.lambda_vq as f32;
    for (a, b) in g_ze.data.iter_mut().zip(&vg.encoder) {
        *a += lvq * b;
    }
    for (pos, &m) in indices.iter().enumerate() {
        for k in 0..d {
            grad[cb_r.start + m * d + k] += lvq * vg.codebook[k * n + pos];
        }
    }

    let embedding = (0..d)
        .map(|k| (ze.data[k * n..(k + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect();
    Ok(PairOut {
        pixel,
        perc,
        vq,
        gan_g,
        gan_d,
        enc_tape,
        g_ze,
        embedding,
        indices,
    })
}

/// Losses and summed gradients of the three passes of one triplet plus its
/// triplet term. `rois[r]` weights the pass whose *target* is `Role::ALL[r]`'s
/// target image.
pub(super) fn anchor_pass(
    tr: &Trainer,
    params: &ModelParams,
    sample: &TripletSample,
    rois: [Option<&Mask>; 3],
    gan: bool,
) -> Result<AnchorOut> {
    let model = &tr.model;
    let w = &tr.config.weights;
    let mut generator = vec![0.0f32; params.generator.len()];
    let mut discriminator = vec![0.0f32; if gan { params.discriminator.len() } else { 0 }];
    let mut parts = LossParts::default();
    let mut gan_d = 0.0;
    let mut audit = Vec::with_capacity(3);
    let mut indices = Vec::new();
    let mut outs = Vec::with_capacity(3);
    for (role, roi) in Role::ALL.into_iter().zip(rois) {
        let target_role = role.target();
        let out = pair_pass(
            tr,
            params,
            sample.input(role),
            sample.input(target_role),
            roi,
            gan,
            &mut generator,
            &mut discriminator,
        )?;
        audit.push(TargetAudit {
            role,
            anchor: sample.anchor.name.clone(),
            input: sample.image(role).name.clone(),
            target: sample.image(target_role).name.clone(),
        });
        parts.pixel += out.pixel;
        parts.perc += out.perc;
        parts.vq += out.vq;
        parts.gan += out.gan_g;
        gan_d += out.gan_d;
        indices.extend_from_slice(&out.indices);
        outs.push(out);
    }

    if tr.config.ablation.uses_triplet() {
        let (fa, fp, fneg) = (&outs[0].embedding, &outs[1].embedding, &outs[2].embedding);
        parts.triplet = triplet_loss(fa, fp, fneg, w.margin)?;
        let tg = triplet_grads(fa, fp, fneg, w.margin)?;
        let lt = w.lambda_triplet as f32;
        for (out, gv) in outs.iter_mut().zip([&tg.anchor, &tg.positive, &tg.negative]) {
            let n = out.g_ze.h * out.g_ze.w;
            for (k, &gk) in gv.iter().enumerate() {
                let share = lt * gk / n as f32;
                for v in &mut out.g_ze.data[k * n..(k + 1) * n] {
                    *v += share;
                }
            }
        }
    }

    let enc_r = model.encoder_range();
    for out in outs {
        model
            .encoder_net()
            .backward(&params.generator[enc_r.clone()], out.enc_tape, out.g_ze, Some(&mut generator[enc_r.clone()]));
    }
    Ok(AnchorOut {
        generator,
        discriminator,
        parts,
        gan_d,
        audit,
        indices,
    })
}

impl Trainer {
    /// ROI masks for the three pass targets of `sample`.
    fn target_rois<'a>(&'a self, sample: &TripletSample) -> [Option<&'a Mask>; 3] {
        Role::ALL.map(|role| {
            let name = &sample.image(role.target()).name;
            self.by_name
                .get(name)
                .and_then(|&i| self.rois[i].as_ref())
                .map(|r| &r.mask)
        })
    }

    /// The triplet drawn for batch slot `slot` at 0-based `step`.
    pub fn triplet_for(&self, step: u64, slot: usize, anchor: usize) -> Result<TripletSample> {
        let roi = self.rois[anchor]
            .clone()
            .ok_or_else(|| Error::RoiFailed(format!("no ROI for `{}`", self.index.entries[anchor].name)))?;
        let mut rng = rng_for(self.config.seed, "triplet", &[step, slot as u64]);
        assemble_triplet_with_roi(
            &self.index,
            anchor,
            roi,
            self.config.positive_mode,
            &self.config.perturb,
            &mut rng,
        )
    }

    /// Loss breakdown of one triplet without updating anything.
    pub fn triplet_losses(&self, params: &ModelParams, sample: &TripletSample, gan: bool) -> Result<(LossParts, f64)> {
        let out = anchor_pass(self, params, sample, self.target_rois(sample), gan)?;
        Ok((out.parts, out.gan_d))
    }

    /// Generator gradient of one triplet's total loss.
    pub fn triplet_gradient(&self, params: &ModelParams, sample: &TripletSample, gan: bool) -> Result<Vec<f32>> {
        Ok(anchor_pass(self, params, sample, self.target_rois(sample), gan)?.generator)
    }
}

pub(super) fn train_step(tr: &Trainer, state: &mut TrainState, anchors: &[usize]) -> Result<StepReport> {
    let gan = tr.gan_active(state);
    let step = state.step;
    let slots: Vec<(usize, usize)> = anchors.iter().copied().enumerate().collect();
    let outs: Vec<Option<AnchorOut>> = tr.exec.map(&slots, |&(slot, a)| {
        let sample = match tr.triplet_for(step, slot, a) {
            Ok(s) => s,
            Err(e) => {
                warn!("step {}: skipping anchor `{}`: {e}", step + 1, tr.index.entries[a].name);
                return None;
            }
        };
        match anchor_pass(tr, &state.params, &sample, tr.target_rois(&sample), gan) {
            Ok(o) => Some(o),
            Err(e) => {
                warn!("step {}: skipping anchor `{}`: {e}", step + 1, sample.anchor.name);
                None
            }
        }
    });
    let skipped = outs.iter().filter(|o| o.is_none()).count();
    let outs: Vec<AnchorOut> = outs.into_iter().flatten().collect();
    if outs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = outs.len() as f64;
    let mut ggen = vec![0.0f32; state.params.generator.len()];
    let mut gdisc = vec![0.0f32; state.params.discriminator.len()];
    let mut parts = LossParts::default();
    let mut gan_d = 0.0;
    let mut audit = Vec::with_capacity(3 * outs.len());
    for o in &outs {
        for (a, b) in ggen.iter_mut().zip(&o.generator) {
            *a += b;
        }
        if gan {
            for (a, b) in gdisc.iter_mut().zip(&o.discriminator) {
                *a += b;
            }
        }
        parts.pixel += o.parts.pixel / k;
        parts.perc += o.parts.perc / k;
        parts.vq += o.parts.vq / k;
        parts.triplet += o.parts.triplet / k;
        parts.gan += o.parts.gan / k;
        gan_d += o.gan_d / k;
        audit.extend(o.audit.iter().cloned());
    }
    let inv = (1.0 / k) as f32;
    ggen.iter_mut().for_each(|g| *g *= inv);
    gdisc.iter_mut().for_each(|g| *g *= inv);

    let log = StepLog {
        step: step + 1,
        parts,
        gan_d,
        total: total_loss(&parts, &tr.config.weights),
    };
    let finite = log.total.is_finite() && gan_d.is_finite() && ggen.iter().chain(&gdisc).all(|g| g.is_finite());
    if !finite {
        let last = state
            .history
            .last()
            .map(|l| l.to_string())
            .unwrap_or_else(|| "none (first step)".to_string());
        return Err(Error::NonFinite { step: step + 1, last });
    }

    let scaled = [(tr.model.codebook_range(), tr.config.codebook_lr_scale as f32)];
    state.opt_generator.step_scaled(&mut state.params.generator, &ggen, &scaled);
    if gan {
        state.opt_discriminator.step(&mut state.params.discriminator, &gdisc);
    }
    for o in &outs {
        for &m in &o.indices {
            state.usage[m] += 1;
        }
    }
    state.step += 1;
    state.history.push(log);
    Ok(StepReport {
        log,
        anchors_used: outs.len(),
        anchors_skipped: skipped,
        gan_active: gan,
        audit,
    })
}
