//! Semantic confusion prior: class-grouped encoder inputs, a per-row
//! encoder/decoder pair, a class-partitioned codebook and its running
//! per-channel variance statistics.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::segnet::{dense_forward, push_dense_stack, LEAKY_SLOPE};
use crate::tensor::{Checkpoint, Var};
use crate::{ParamSet, Tape, Tensor};

pub const DEFAULT_CODES_PER_CLASS: usize = 32;
pub const DEFAULT_LATENT_DIM: usize = 64;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_GAMMA: f64 = 0.9;
pub const VAR_FLOOR: f64 = 1e-6;
pub const INIT_VARIANCE: f64 = 1.0;
pub const ENCODER_HIDDEN: [usize; 4] = [16, 32, 64, 128];
/// Coordinates are scaled by this before entering the encoder so they sit in
/// the same range as probabilities.
pub const COORD_SCALE: f64 = 0.1;
const INIT_NOISE: f64 = 0.01;
/// Codes never used after this many statistic updates get re-seeded.
pub const DEAD_CODE_STEPS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Vqvae,
    Prototype,
}

/// Encoder rows `[probs ‖ coords]` regrouped contiguously by class.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub class_count: usize,
    /// Probabilities, grouped order, `[n, C]`.
    pub probs: Tensor,
    /// Coordinates, grouped order, `[n, 3]`.
    pub coords: Tensor,
    /// Class of each grouped row.
    pub classes: Vec<usize>,
    /// `perm[g]` is the input row placed at grouped position `g`.
    pub perm: Vec<usize>,
    /// First grouped row of each class block.
    pub block_starts: Vec<usize>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Full `[n, C + 3]` rows.
    pub fn rows(&self) -> Tensor {
        let c = self.class_count;
        let mut v = Vec::with_capacity(self.len() * (c + 3));
        for r in 0..self.len() {
            v.extend_from_slice(self.probs.row(r));
            v.extend_from_slice(self.coords.row(r));
        }
        Tensor::new(vec![self.len(), c + 3], v).expect("grouped rows")
    }

    /// Rows on a tape, with probabilities gathered from a `[m, C]` node so that
    /// gradients can reach whatever produced them. `row_of_input[i]` maps input
    /// row `i` of this grouping to a row of `probs`.
    pub fn rows_on_tape(&self, tape: &mut Tape, probs: Var, row_of_input: &[usize]) -> Result<Var> {
        let idx: Vec<usize> = self.perm.iter().map(|&i| row_of_input[i]).collect();
        let p = tape.gather_rows(probs, &idx)?;
        let xyz = tape.constant_tensor(&self.coords);
        tape.concat(&[p, xyz], 1)
    }

    /// Undoes the grouping.
    pub fn unpermute<T: Clone + Default>(&self, grouped: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); grouped.len()];
        for (g, &i) in self.perm.iter().enumerate() {
            out[i] = grouped[g].clone();
        }
        out
    }
}

/// Groups rows by label (class 0 first, stable within a class). Callers drop
/// ignore-labelled rows first.
pub fn build_encoder_input(
    probs: &[f64],
    class_count: usize,
    coords: &[[f64; 3]],
    labels: &[u16],
) -> Result<EncoderInput> {
    let n = labels.len();
    if probs.len() != n * class_count || coords.len() != n {
        return Err(Error::Shape {
            op: "build_encoder_input",
            lhs: vec![probs.len() / class_count.max(1), class_count],
            rhs: vec![coords.len(), labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
        return Err(Error::invalid(format!("encoder input label {bad} not in 0..{class_count}")));
    }
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut block_starts = vec![0usize; class_count];
    for c in 1..class_count {
        block_starts[c] = block_starts[c - 1] + counts[c - 1];
    }
    let mut next = block_starts.clone();
    let mut perm = vec![0usize; n];
    for (i, &l) in labels.iter().enumerate() {
        perm[next[l as usize]] = i;
        next[l as usize] += 1;
    }
    let mut p = Vec::with_capacity(n * class_count);
    let mut x = Vec::with_capacity(n * 3);
    for &i in &perm {
        p.extend_from_slice(&probs[i * class_count..(i + 1) * class_count]);
        x.extend_from_slice(&coords[i]);
    }
    Ok(EncoderInput {
        class_count,
        probs: Tensor::new(vec![n, class_count], p)?,
        coords: Tensor::new(vec![n, 3], x)?,
        classes: perm.iter().map(|&i| labels[i] as usize).collect(),
        perm,
        block_starts,
    })
}

/// Encoder and decoder parameters. The prototype variant has a single frozen
/// random projection as its encoder and no decoder.
#[derive(Debug, Clone)]
pub struct PriorAutoencoder {
    pub kind: PriorKind,
    pub class_count: usize,
    pub latent_dim: usize,
    pub beta: f64,
    /// Encoder slots first, then decoder slots.
    pub params: ParamSet,
    encoder_slots: usize,
}

impl PriorAutoencoder {
    pub fn new(kind: PriorKind, class_count: usize, latent_dim: usize, key: RngKey) -> Self {
        Self::with_hidden(kind, class_count, latent_dim, &ENCODER_HIDDEN, key)
    }

    /// Encoder widths `hidden`, decoder widths reversed.
    pub fn with_hidden(kind: PriorKind, class_count: usize, latent_dim: usize, hidden: &[usize], key: RngKey) -> Self {
        let mut params = ParamSet::new();
        let input = class_count + 3;
        match kind {
            PriorKind::Vqvae => {
                let mut enc = vec![input];
                enc.extend_from_slice(hidden);
                enc.push(latent_dim);
                push_dense_stack(&mut params, "scp.enc", &enc, key.derive_tag("encoder"));
                let encoder_slots = params.len();
                let mut dec = vec![latent_dim];
                dec.extend(hidden.iter().rev());
                dec.push(class_count);
                push_dense_stack(&mut params, "scp.dec", &dec, key.derive_tag("decoder"));
                PriorAutoencoder {
                    kind,
                    class_count,
                    latent_dim,
                    beta: DEFAULT_BETA,
                    params,
                    encoder_slots,
                }
            }
            PriorKind::Prototype => {
                let normal = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("positive std");
                let mut rng = key.derive_tag("projection").stream();
                let w = (0..input * latent_dim).map(|_| normal.sample(&mut rng)).collect();
                params.push("scp.enc.fc0.weight", Tensor::new(vec![input, latent_dim], w).expect("projection"));
                params.push("scp.enc.fc0.bias", Tensor::zeros(vec![latent_dim]));
                PriorAutoencoder {
                    kind,
                    class_count,
                    latent_dim,
                    beta: DEFAULT_BETA,
                    params,
                    encoder_slots: 2,
                }
            }
        }
    }

    pub fn encoder_slots(&self) -> usize {
        self.encoder_slots
    }

    /// Copy holding only the encoder parameters.
    pub fn encoder_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in self.params.iter().take(self.encoder_slots) {
            p.push(name, t.clone());
        }
        p
    }

    /// `z_e = E(rows)`; `vars` are the bound parameters (all of them, or just
    /// the encoder slots).
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], rows: Var) -> Result<Var> {
        encode_with(tape, &vars[..self.encoder_slots], rows, self.class_count)
    }

    /// Row-wise softmax of the decoder output.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        if self.kind != PriorKind::Vqvae {
            return Err(Error::invalid("prototype prior has no decoder"));
        }
        if tape.shape(z).get(1) != Some(&self.latent_dim) {
            return Err(Error::Shape {
                op: "decode",
                lhs: tape.shape(z).to_vec(),
                rhs: vec![self.latent_dim],
            });
        }
        let h = dense_forward(tape, &vars[self.encoder_slots..], z, LEAKY_SLOPE)?;
        Ok(tape.softmax(h))
    }

    /// Gradient-free embeddings of full `[n, C + 3]` rows.
    pub fn encode_values(&self, rows: &Tensor) -> Result<Tensor> {
        encode_frozen(&self.encoder_params(), rows, self.class_count)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_params(&self.params);
    }
}

pub(crate) fn encode_with(tape: &mut Tape, enc: &[Var], rows: Var, class_count: usize) -> Result<Var> {
    let width = class_count + 3;
    if tape.shape(rows).len() != 2 || tape.shape(rows)[1] != width {
        return Err(Error::Shape {
            op: "encode",
            lhs: tape.shape(rows).to_vec(),
            rhs: vec![width],
        });
    }
    let mut s = vec![1.0; width];
    s[class_count..].fill(COORD_SCALE);
    let s = tape.constant(vec![width], s);
    let x = tape.mul(rows, s)?;
    dense_forward(tape, enc, x, LEAKY_SLOPE)
}

pub(crate) fn encode_frozen(enc: &ParamSet, rows: &Tensor, class_count: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = enc.bind_frozen(&mut tape);
    let x = tape.constant_tensor(rows);
    let z = encode_with(&mut tape, &vars, x, class_count)?;
    Ok(tape.to_tensor(z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    /// Class-local code index per row.
    pub index: Vec<usize>,
    /// Row index into the flat `[C·k, D]` table.
    pub global: Vec<usize>,
    /// Euclidean distance to the assigned code.
    pub distance: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Codes, tracked variances and usage, `[C·k, D]` row-major with class `c`
/// owning rows `c·k .. (c+1)·k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookState {
    pub class_count: usize,
    pub codes_per_class: usize,
    pub latent_dim: usize,
    /// Single trainable tensor named `scp.codebook`.
    pub codes: ParamSet,
    pub variances: Vec<f64>,
    pub usage: Vec<u64>,
    pub initialized: Vec<bool>,
    pub updates: u64,
}

impl CodebookState {
    pub fn new(class_count: usize, codes_per_class: usize, latent_dim: usize) -> Self {
        let n = class_count * codes_per_class;
        let mut codes = ParamSet::new();
        codes.push("scp.codebook", Tensor::zeros(vec![n, latent_dim]));
        CodebookState {
            class_count,
            codes_per_class,
            latent_dim,
            codes,
            variances: vec![INIT_VARIANCE; n * latent_dim],
            usage: vec![0; n],
            initialized: vec![false; class_count],
            updates: 0,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.class_count * self.codes_per_class
    }

    pub fn table(&self) -> &[f64] {
        self.codes.tensor(0).values()
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        self.codes.tensor_mut(0).values_mut()
    }

    pub fn global(&self, class: usize, j: usize) -> usize {
        class * self.codes_per_class + j
    }

    pub fn code(&self, global: usize) -> &[f64] {
        &self.table()[global * self.latent_dim..(global + 1) * self.latent_dim]
    }

    pub fn variance(&self, global: usize) -> &[f64] {
        &self.variances[global * self.latent_dim..(global + 1) * self.latent_dim]
    }

    fn seed_code(&mut self, global: usize, row: &[f64], rng: &mut impl Rng) {
        let noise = Normal::new(0.0, INIT_NOISE).expect("positive std");
        let d = self.latent_dim;
        for (dst, &v) in self.table_mut()[global * d..(global + 1) * d].iter_mut().zip(row) {
            *dst = v + noise.sample(rng);
        }
    }

    /// Seeds each not-yet-initialized class present in this batch from its
    /// rows plus small Gaussian noise.
    pub fn initialize_classes(&mut self, z_e: &[f64], classes: &[usize], key: RngKey) {
        let d = self.latent_dim;
        for c in 0..self.class_count {
            if self.initialized[c] {
                continue;
            }
            let rows: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let mut rng = key.derive(c as u64).stream();
            for j in 0..self.codes_per_class {
                let r = rows[rng.random_range(0..rows.len())];
                let g = self.global(c, j);
                self.seed_code(g, &z_e[r * d..(r + 1) * d], &mut rng);
            }
            self.initialized[c] = true;
        }
    }

    /// Re-seeds codes that were never assigned from a random row of their
    /// class in this batch.
    pub fn reseed_dead(&mut self, z_e: &[f64], classes: &[usize], key: RngKey) -> usize {
        let d = self.latent_dim;
        let mut reseeded = 0;
        for c in 0..self.class_count {
            let rows: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let mut rng = key.derive(c as u64).stream();
            for j in 0..self.codes_per_class {
                let g = self.global(c, j);
                if self.usage[g] == 0 {
                    let r = rows[rng.random_range(0..rows.len())];
                    self.seed_code(g, &z_e[r * d..(r + 1) * d], &mut rng);
                    reseeded += 1;
                }
            }
        }
        reseeded
    }

    /// EMA update of per-channel variances for codes with at least two rows;
    /// usage counters grow by the assigned row counts.
    pub fn update_code_stats(&mut self, z_e: &[f64], qr: &QuantizeResult, gamma: f64) -> Result<()> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("momentum must be in (0, 1), got {gamma}")));
        }
        let d = self.latent_dim;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.num_codes()];
        for (row, &g) in qr.global.iter().enumerate() {
            members[g].push(row);
        }
        for (g, rows) in members.iter().enumerate() {
            self.usage[g] += rows.len() as u64;
            if rows.len() < 2 {
                continue;
            }
            let n = rows.len() as f64;
            for ch in 0..d {
                let mean = rows.iter().map(|&r| z_e[r * d + ch]).sum::<f64>() / n;
                let var = rows
                    .iter()
                    .map(|&r| {
                        let x = z_e[r * d + ch] - mean;
                        x * x
                    })
                    .sum::<f64>()
                    / n;
                let slot = &mut self.variances[g * d + ch];
                *slot = (gamma * *slot + (1.0 - gamma) * var).max(VAR_FLOOR);
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Usage-blind nearest code over the whole table (all classes).
    pub fn nearest_global(&self, z_e: &[f64]) -> Vec<usize> {
        let d = self.latent_dim;
        z_e.chunks(d)
            .map(|z| {
                let mut best = (f64::INFINITY, 0);
                for g in 0..self.num_codes() {
                    let dist = sq_dist(z, self.code(g));
                    if dist < best.0 {
                        best = (dist, g);
                    }
                }
                best.1
            })
            .collect()
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let n = self.num_codes();
        ckpt.push_params(&self.codes);
        ckpt.push(
            "scp.variances",
            Tensor::new(vec![n, self.latent_dim], self.variances.clone()).expect("variance table"),
        );
        ckpt.push(
            "scp.usage",
            Tensor::new(vec![n], self.usage.iter().map(|&u| u as f64).collect()).expect("usage"),
        );
        let flags = self.initialized.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ckpt.push("scp.initialized", Tensor::new(vec![self.class_count], flags).expect("flags"));
        ckpt.push("scp.updates", Tensor::scalar(self.updates as f64));
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params(&mut self.codes)?;
        let v = ckpt.require("scp.variances")?;
        if v.numel() != self.variances.len() {
            return Err(Error::invalid("checkpoint variance table has the wrong size"));
        }
        self.variances.copy_from_slice(v.values());
        let u = ckpt.require("scp.usage")?;
        if u.numel() != self.usage.len() {
            return Err(Error::invalid("checkpoint usage table has the wrong size"));
        }
        self.usage = u.values().iter().map(|&x| x as u64).collect();
        let f = ckpt.require("scp.initialized")?;
        if f.numel() != self.class_count {
            return Err(Error::invalid("checkpoint class flags have the wrong size"));
        }
        self.initialized = f.values().iter().map(|&x| x != 0.0).collect();
        self.updates = ckpt.require("scp.updates")?.values()[0] as u64;
        Ok(())
    }
}

/// Nearest code within each row's class sub-codebook; ties to the lowest
/// index.
pub fn quantize(cb: &CodebookState, z_e: &[f64], classes: &[usize]) -> QuantizeResult {
    let d = cb.latent_dim;
    let k = cb.codes_per_class;
    let mut out = QuantizeResult {
        index: Vec::with_capacity(classes.len()),
        global: Vec::with_capacity(classes.len()),
        distance: Vec::with_capacity(classes.len()),
    };
    for (z, &c) in z_e.chunks(d).zip(classes) {
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let dist = sq_dist(z, cb.code(c * k + j));
            if dist < best.0 {
                best = (dist, j);
            }
        }
        out.index.push(best.1);
        out.global.push(c * k + best.1);
        out.distance.push(best.0.sqrt());
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct VqLosses {
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// The three-term objective from already-built nodes: `decoded` must come
/// from the straight-through latent, `target` must be gradient-free.
pub fn vq_losses(tape: &mut Tape, z_e: Var, z_q: Var, decoded: Var, target: Var, beta: f64) -> Result<VqLosses> {
    let diff = tape.sub(decoded, target)?;
    let sq = tape.square(diff);
    let recon = tape.mean(sq);

    let ze_sg = tape.stop_gradient(z_e);
    let diff = tape.sub(ze_sg, z_q)?;
    let sq = tape.square(diff);
    let codebook = tape.mean(sq);

    let zq_sg = tape.stop_gradient(z_q);
    let diff = tape.sub(z_e, zq_sg)?;
    let sq = tape.square(diff);
    let commitment = tape.mean(sq);

    let a = tape.add(recon, codebook)?;
    let b = tape.scale(commitment, beta);
    let total = tape.add(a, b)?;
    Ok(VqLosses {
        recon,
        codebook,
        commitment,
        total,
    })
}

/// Everything one VQ pass produces.
#[derive(Debug)]
pub struct VqPass {
    pub losses: VqLosses,
    pub z_e: Var,
    pub quant: QuantizeResult,
}

/// Encode, quantize (assignments fixed from the current values), decode
/// through the straight-through path and score against the input
/// probabilities. `ae_vars` and `code_var` are the bound autoencoder and
/// codebook parameters.
pub fn vq_pass(
    tape: &mut Tape,
    ae: &PriorAutoencoder,
    ae_vars: &[Var],
    code_var: Var,
    cb: &CodebookState,
    input: &EncoderInput,
    assignments: Option<&QuantizeResult>,
) -> Result<VqPass> {
    let rows = tape.constant_tensor(&input.rows());
    let z_e = ae.encode(tape, ae_vars, rows)?;
    let quant = match assignments {
        Some(q) => q.clone(),
        None => quantize(cb, tape.value(z_e), &input.classes),
    };
    let z_q = tape.gather_rows(code_var, &quant.global)?;
    let st = tape.straight_through(z_q, z_e)?;
    let decoded = ae.decode(tape, ae_vars, st)?;
    let target = tape.constant_tensor(&input.probs);
    let losses = vq_losses(tape, z_e, z_q, decoded, target, ae.beta)?;
    Ok(VqPass { losses, z_e, quant })
}

/// Value of the VQ surrogate with every stop-gradient operand held at
/// `frozen`: the codebook term uses `frozen.z_e`, the commitment term uses
/// `frozen.z_q`, and the decoder sees `z_e + (frozen.z_q - frozen.z_e)`. At
/// the frozen point this equals the real objective, and its derivative is
/// what backward computes, so finite differences of it check the backward
/// pass including the straight-through routing.
pub fn vq_surrogate_value(
    ae: &PriorAutoencoder,
    cb: &CodebookState,
    input: &EncoderInput,
    quant: &QuantizeResult,
    frozen: &FrozenVq,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ae.params.bind_frozen(&mut tape);
    let code = cb.codes.bind_frozen(&mut tape)[0];
    let rows = tape.constant_tensor(&input.rows());
    let z_e = ae.encode(&mut tape, &vars, rows)?;
    let z_q = tape.gather_rows(code, &quant.global)?;
    let ze0 = tape.constant_tensor(&frozen.z_e);
    let zq0 = tape.constant_tensor(&frozen.z_q);
    let offset = tape.sub(zq0, ze0)?;
    let st = tape.add(z_e, offset)?;
    let decoded = ae.decode(&mut tape, &vars, st)?;
    let target = tape.constant_tensor(&input.probs);
    let diff = tape.sub(decoded, target)?;
    let sq = tape.square(diff);
    let recon = tape.mean(sq);
    let diff = tape.sub(ze0, z_q)?;
    let sq = tape.square(diff);
    let codebook = tape.mean(sq);
    let diff = tape.sub(z_e, zq0)?;
    let sq = tape.square(diff);
    let commitment = tape.mean(sq);
    Ok(tape.scalar(recon) + tape.scalar(codebook) + ae.beta * tape.scalar(commitment))
}

/// Stop-gradient operands captured at a base point.
#[derive(Debug, Clone)]
pub struct FrozenVq {
    pub z_e: Tensor,
    pub z_q: Tensor,
}

impl FrozenVq {
    pub fn capture(ae: &PriorAutoencoder, cb: &CodebookState, input: &EncoderInput, quant: &QuantizeResult) -> Result<Self> {
        let z_e = ae.encode_values(&input.rows())?;
        let d = cb.latent_dim;
        let mut q = Vec::with_capacity(quant.global.len() * d);
        for &g in &quant.global {
            q.extend_from_slice(cb.code(g));
        }
        Ok(FrozenVq {
            z_e,
            z_q: Tensor::new(vec![quant.global.len(), d], q)?,
        })
    }
}

/// Prototype variant of the prior update: nearest prototype within class,
/// EMA pull toward the assigned-row mean, then the usual variance update.
pub fn prototype_prior_step(
    ae: &PriorAutoencoder,
    cb: &mut CodebookState,
    input: &EncoderInput,
    gamma: f64,
    key: RngKey,
) -> Result<QuantizeResult> {
    if ae.kind != PriorKind::Prototype {
        return Err(Error::Config("prototype step requested but the prior is not in prototype mode".into()));
    }
    let z = ae.encode_values(&input.rows())?;
    let z = z.values();
    cb.initialize_classes(z, &input.classes, key);
    let qr = quantize(cb, z, &input.classes);
    let d = cb.latent_dim;
    let mut sums = vec![0.0; cb.num_codes() * d];
    let mut counts = vec![0usize; cb.num_codes()];
    for (row, &g) in qr.global.iter().enumerate() {
        counts[g] += 1;
        for ch in 0..d {
            sums[g * d + ch] += z[row * d + ch];
        }
    }
    let table = cb.table_mut();
    for g in 0..counts.len() {
        if counts[g] == 0 {
            continue;
        }
        for ch in 0..d {
            let mean = sums[g * d + ch] / counts[g] as f64;
            let slot = &mut table[g * d + ch];
            *slot = gamma * *slot + (1.0 - gamma) * mean;
        }
    }
    cb.update_code_stats(z, &qr, gamma)?;
    Ok(qr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookExport {
    pub class_count: usize,
    pub codes_per_class: usize,
    pub latent_dim: usize,
    pub codes: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub usage: Vec<u64>,
}

pub fn export_codebook(cb: &CodebookState, path: &Path) -> Result<()> {
    let d = cb.latent_dim;
    let doc = CodebookExport {
        class_count: cb.class_count,
        codes_per_class: cb.codes_per_class,
        latent_dim: d,
        codes: cb.table().chunks(d).map(<[f64]>::to_vec).collect(),
        variances: cb.variances.chunks(d).map(<[f64]>::to_vec).collect(),
        usage: cb.usage.clone(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_codebook(path: &Path) -> Result<CodebookState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CodebookExport = serde_json::from_str(&text)?;
    let n = doc.class_count * doc.codes_per_class;
    let rows_ok = |rows: &[Vec<f64>]| rows.len() == n && rows.iter().all(|r| r.len() == doc.latent_dim);
    if !rows_ok(&doc.codes) || !rows_ok(&doc.variances) || doc.usage.len() != n {
        return Err(Error::Format {
            kind: "codebook json",
            offset: 0,
            msg: "table sizes disagree with the declared shape".into(),
        });
    }
    let mut cb = CodebookState::new(doc.class_count, doc.codes_per_class, doc.latent_dim);
    cb.table_mut().copy_from_slice(&doc.codes.concat());
    cb.variances = doc.variances.concat();
    cb.usage = doc.usage;
    cb.initialized = (0..doc.class_count)
        .map(|c| cb.usage[c * doc.codes_per_class..(c + 1) * doc.codes_per_class].iter().any(|&u| u > 0))
        .collect();
    Ok(cb)
}
