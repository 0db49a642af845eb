//! Dual residual quantizer: two MLP encoder/decoder pairs (one per channel)
//! whose latents are greedily quantized against L per-level codebooks.
//! Training combines reconstruction, the stop-gradient quantization loss,
//! and a contrastive term aligning the two channels' latents. Decoder input
//! flows through a straight-through estimator so the encoders receive
//! reconstruction gradient despite the discrete code selection.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{load_archive, save_archive, Archive, CkptError};
use crate::data::Channel;
use crate::losses::info_nce;
use crate::tape::{BoundParams, Mat, ParamStore, Tape, Var};

#[derive(thiserror::Error, Debug)]
pub enum QuantizerError {
    #[error("loss became NaN at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("embedding batch is empty or ragged")]
    BadInput,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Ckpt(#[from] CkptError),
    #[error("codes file: {0}")]
    Codes(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Quantization levels L.
    pub levels: usize,
    /// Codes per level N_c.
    pub codebook_size: usize,
    /// Latent width d_l.
    pub code_dim: usize,
    /// Encoder hidden widths; decoder mirrors them.
    pub hidden: Vec<usize>,
    pub lambda_rq: f64,
    pub lambda_rq_cl: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau_init: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            levels: 4,
            codebook_size: 256,
            code_dim: 32,
            hidden: vec![256, 256],
            lambda_rq: 1.0,
            lambda_rq_cl: 1e-4,
            epochs: 500,
            batch_size: 1024,
            lr: 1e-3,
            seed: 42,
            tau_init: 0.1,
        }
    }
}

fn chan_tag(ch: Channel) -> &'static str {
    match ch {
        Channel::Search => "s",
        Channel::Rec => "r",
    }
}

/// Greedy per-level nearest-neighbor quantization of one latent. Returns
/// the chosen code per level (ties to the lowest index), the summed code
/// embedding, and the residual after every level (residuals[0] = z, so
/// z − quantized = residuals[L] exactly).
pub fn residual_quantize(z: &[f64], codebooks: &[&Mat]) -> (Vec<usize>, Vec<f64>, Vec<Vec<f64>>) {
    let d = z.len();
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    residuals.push(z.to_vec());
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut quantized = vec![0.0; d];
    let mut r = z.to_vec();
    for cb in codebooks {
        assert_eq!(cb.cols, d, "codebook width mismatch");
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..cb.rows {
            let row = cb.row(k);
            let mut dist = 0.0;
            for j in 0..d {
                let t = r[j] - row[j];
                dist += t * t;
            }
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        codes.push(best);
        let row = cb.row(best);
        for j in 0..d {
            quantized[j] += row[j];
            r[j] -= row[j];
        }
        residuals.push(r.clone());
    }
    (codes, quantized, residuals)
}

// ---- parameter construction and plain forward passes ----

fn init_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn insert_mlp(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dims: &[usize],
) {
    for i in 0..dims.len() - 1 {
        params.insert(&format!("{prefix}.w{i}"), init_linear(rng, dims[i], dims[i + 1]));
        params.insert(&format!("{prefix}.b{i}"), Mat::zeros(1, dims[i + 1]));
    }
}

fn mlp_layers(dims_len: usize) -> usize {
    dims_len - 1
}

/// Plain (non-tape) MLP forward: ReLU between layers, linear output.
fn mlp_value(params: &ParamStore, prefix: &str, n_layers: usize, x: &Mat) -> Mat {
    let mut h = x.clone();
    for i in 0..n_layers {
        let w = params.get(&format!("{prefix}.w{i}"));
        let b = params.get(&format!("{prefix}.b{i}"));
        let mut y = h.matmul(w);
        for r in 0..y.rows {
            for c in 0..y.cols {
                *y.at_mut(r, c) += b.data[c];
            }
        }
        if i + 1 < n_layers {
            for v in &mut y.data {
                *v = v.max(0.0);
            }
        }
        h = y;
    }
    h
}

fn mlp_tape(tape: &mut Tape, bound: &BoundParams, prefix: &str, n_layers: usize, x: Var) -> Var {
    let mut h = x;
    for i in 0..n_layers {
        let w = bound.v(&format!("{prefix}.w{i}"));
        let b = bound.v(&format!("{prefix}.b{i}"));
        let y = tape.matmul(h, w);
        h = tape.add_row_broadcast(y, b);
        if i + 1 < n_layers {
            h = tape.relu(h);
        }
    }
    h
}

/// The trained artifact: frozen parameters plus the loss trace.
pub struct TrainedQuantizer {
    pub config: QuantizerConfig,
    pub embed_dim: usize,
    pub params: ParamStore,
    pub trace: Vec<EpochTrace>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    pub rq_cl: f64,
    pub total: f64,
}

impl TrainedQuantizer {
    fn enc_layers(&self) -> usize {
        mlp_layers(self.enc_dims().len())
    }

    fn enc_dims(&self) -> Vec<usize> {
        let mut d = vec![self.embed_dim];
        d.extend(&self.config.hidden);
        d.push(self.config.code_dim);
        d
    }

    /// Encoder forward on a batch (rows = users).
    pub fn encode(&self, ch: Channel, v: &Mat) -> Mat {
        mlp_value(&self.params, &format!("enc_{}", chan_tag(ch)), self.enc_layers(), v)
    }

    /// Decoder forward on a batch of (straight-through) latents.
    pub fn decode(&self, ch: Channel, z: &Mat) -> Mat {
        mlp_value(&self.params, &format!("dec_{}", chan_tag(ch)), self.enc_layers(), z)
    }

    pub fn codebook(&self, ch: Channel, level: usize) -> &Mat {
        self.params.get(&format!("cb_{}.{level}", chan_tag(ch)))
    }

    pub fn codebooks(&self, ch: Channel) -> Vec<&Mat> {
        (0..self.config.levels).map(|l| self.codebook(ch, l)).collect()
    }
}

// ---- loss construction ----

pub struct RqLossParts {
    pub total: Var,
    pub recon: Var,
    pub rq: Var,
    pub rq_cl: Option<Var>,
}

/// Builds the full training loss on a tape for one batch. `codes_*` hold
/// the per-level code picks (shape levels × batch) computed from the same
/// parameter values bound into the tape; quantization is not differentiable
/// so the picks enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &QuantizerConfig,
    vs: &Mat,
    vr: &Mat,
    codes_s: &[Vec<usize>],
    codes_r: &[Vec<usize>],
    lambda_rq_cl: f64,
) -> RqLossParts {
    let b = vs.rows;
    assert_eq!(vr.rows, b);
    let inv_b = 1.0 / b as f64;
    let n_layers = mlp_layers(cfg.hidden.len() + 2);

    let mut recon_sum: Option<Var> = None;
    let mut rq_sum: Option<Var> = None;
    let mut latents: Vec<Var> = Vec::with_capacity(2);

    for (ch, v, codes) in
        [(Channel::Search, vs, codes_s), (Channel::Rec, vr, codes_r)]
    {
        let tag = chan_tag(ch);
        let v_const = tape.constant(v.clone());
        let z = mlp_tape(tape, bound, &format!("enc_{tag}"), n_layers, v_const);
        latents.push(z);

        let mut r_prev = z;
        let mut zhat: Option<Var> = None;
        for (l, level_codes) in codes.iter().enumerate() {
            let cb = bound.v(&format!("cb_{tag}.{l}"));
            let e = tape.gather_rows(cb, level_codes.clone());
            // codebook pull: ‖sg[r] − e‖², gradient reaches the codebook only
            let sg_r = tape.stop_grad(r_prev);
            let cb_diff = tape.sub(sg_r, e);
            let cb_term = tape.sum_sq(cb_diff);
            rq_sum = Some(match rq_sum {
                None => cb_term,
                Some(a) => tape.add(a, cb_term),
            });
            // commitment: ‖r − sg[e]‖²; the same node is the next residual
            let sg_e = tape.stop_grad(e);
            r_prev = tape.sub(r_prev, sg_e);
            let commit_term = tape.sum_sq(r_prev);
            rq_sum = Some(match rq_sum {
                None => commit_term,
                Some(a) => tape.add(a, commit_term),
            });
            zhat = Some(match zhat {
                None => e,
                Some(a) => tape.add(a, e),
            });
        }

        // straight-through: value is the quantized sum, gradient is identity
        let zq = zhat.expect("levels >= 1");
        let st_diff = tape.sub(zq, z);
        let st_sg = tape.stop_grad(st_diff);
        let st = tape.add(z, st_sg);

        let vhat = mlp_tape(tape, bound, &format!("dec_{tag}"), n_layers, st);
        let rdiff = tape.sub(v_const, vhat);
        let rterm = tape.sum_sq(rdiff);
        recon_sum = Some(match recon_sum {
            None => rterm,
            Some(a) => tape.add(a, rterm),
        });
    }

    let recon = tape.scale(recon_sum.unwrap(), inv_b);
    let rq = tape.scale(rq_sum.unwrap(), inv_b);
    let rq_w = tape.scale(rq, cfg.lambda_rq);
    let mut total = tape.add(recon, rq_w);
    let mut rq_cl = None;
    if lambda_rq_cl != 0.0 {
        let tau = bound.v("tau1");
        let cl = info_nce(tape, latents[0], latents[1], tau);
        let cl_w = tape.scale(cl, lambda_rq_cl);
        total = tape.add(total, cl_w);
        rq_cl = Some(cl);
    }
    RqLossParts { total, recon, rq, rq_cl }
}

// ---- codebook initialization ----

/// Plain Lloyd k-means over rows; seeded, 10 rounds, empty clusters
/// reseeded from random rows. Requires rows ≥ k.
fn kmeans(rows: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = rows.rows;
    let d = rows.cols;
    assert!(n >= k);
    let mut picks: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        picks.swap(i, j);
    }
    let mut centers = Mat::zeros(k, d);
    for (c, &p) in picks[..k].iter().enumerate() {
        centers.data[c * d..(c + 1) * d].copy_from_slice(rows.row(p));
    }
    let mut assign = vec![0usize; n];
    for _round in 0..10 {
        for i in 0..n {
            let r = rows.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let cr = centers.row(c);
                let mut dist = 0.0;
                for j in 0..d {
                    let t = r[j] - cr[j];
                    dist += t * t;
                }
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Mat::zeros(k, d);
        for i in 0..n {
            counts[assign[i]] += 1;
            let r = rows.row(i);
            for j in 0..d {
                sums.data[assign[i] * d + j] += r[j];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let p = rng.gen_range(0..n);
                centers.data[c * d..(c + 1) * d].copy_from_slice(rows.row(p));
            } else {
                for j in 0..d {
                    centers.data[c * d + j] = sums.data[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    centers
}

// ---- training ----

fn to_mat(rows: &[Vec<f32>]) -> Result<Mat, QuantizerError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(QuantizerError::BadInput);
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(QuantizerError::BadInput);
    }
    Ok(Mat::from_vec(
        rows.len(),
        d,
        rows.iter().flat_map(|r| r.iter().map(|x| *x as f64)).collect(),
    ))
}

fn gather_batch(m: &Mat, idx: &[usize]) -> Mat {
    let d = m.cols;
    let mut out = Mat::zeros(idx.len(), d);
    for (r, &i) in idx.iter().enumerate() {
        out.data[r * d..(r + 1) * d].copy_from_slice(m.row(i));
    }
    out
}

/// Per-row quantization of a latent batch against the current codebooks.
/// Returns (levels × batch) code picks plus the level-input residuals
/// (levels × batch × d_l) used by dead-code restarts.
fn quantize_batch(
    params: &ParamStore,
    cfg: &QuantizerConfig,
    ch: Channel,
    z: &Mat,
) -> (Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>) {
    let cbs: Vec<&Mat> =
        (0..cfg.levels).map(|l| params.get(&format!("cb_{}.{l}", chan_tag(ch)))).collect();
    let mut codes = vec![Vec::with_capacity(z.rows); cfg.levels];
    let mut level_inputs = vec![Vec::with_capacity(z.rows); cfg.levels];
    for r in 0..z.rows {
        let (c, _, residuals) = residual_quantize(z.row(r), &cbs);
        for l in 0..cfg.levels {
            codes[l].push(c[l]);
            level_inputs[l].push(residuals[l].clone());
        }
    }
    (codes, level_inputs)
}

/// Trains the dual quantizer on per-user preference embeddings (row u of
/// each channel belongs to user u). Codebooks are k-means-initialized from
/// the first batch's level residuals when the batch is large enough, and
/// codes unused for a whole epoch are restarted from random in-batch
/// residuals with their optimizer moments cleared.
pub fn train_rqvae(
    vs: &[Vec<f32>],
    vr: &[Vec<f32>],
    cfg: &QuantizerConfig,
) -> Result<TrainedQuantizer, QuantizerError> {
    let vs = to_mat(vs)?;
    let vr = to_mat(vr)?;
    if vs.rows != vr.rows || vs.cols != vr.cols {
        return Err(QuantizerError::BadInput);
    }
    let d_e = vs.cols;
    let n = vs.rows;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut dims = vec![d_e];
    dims.extend(&cfg.hidden);
    dims.push(cfg.code_dim);
    let n_layers = mlp_layers(dims.len());
    let rev: Vec<usize> = dims.iter().rev().copied().collect();

    let mut params = ParamStore::new();
    for ch in Channel::BOTH {
        let tag = chan_tag(ch);
        insert_mlp(&mut params, &mut rng, &format!("enc_{tag}"), &dims);
        insert_mlp(&mut params, &mut rng, &format!("dec_{tag}"), &rev);
    }
    // codebooks appended after: k-means overwrite happens below
    let sd = (1.0 / cfg.code_dim as f64).sqrt();
    for ch in Channel::BOTH {
        for l in 0..cfg.levels {
            let cb = Mat::from_vec(
                cfg.codebook_size,
                cfg.code_dim,
                (0..cfg.codebook_size * cfg.code_dim)
                    .map(|_| rng.gen_range(-1.0..1.0) * sd)
                    .collect(),
            );
            params.insert(&format!("cb_{}.{l}", chan_tag(ch)), cb);
        }
    }
    params.insert("tau1", Mat::scalar(cfg.tau_init));

    let mut order: Vec<usize> = (0..n).collect();

    // k-means init from the first batch of the first epoch
    {
        use rand::seq::SliceRandom;
        let mut ep_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut first_order = order.clone();
        first_order.shuffle(&mut ep_rng);
        let take = first_order.len().min(cfg.batch_size);
        let idx = &first_order[..take];
        if take >= cfg.codebook_size {
            for (ch, table) in [(Channel::Search, &vs), (Channel::Rec, &vr)] {
                let batch = gather_batch(table, idx);
                let z = mlp_value(&params, &format!("enc_{}", chan_tag(ch)), n_layers, &batch);
                let mut resid = z;
                for l in 0..cfg.levels {
                    let centers = kmeans(&resid, cfg.codebook_size, &mut rng);
                    *params.get_mut(&format!("cb_{}.{l}", chan_tag(ch))) = centers;
                    let cb = params.get(&format!("cb_{}.{l}", chan_tag(ch))).clone();
                    let mut next = Mat::zeros(resid.rows, resid.cols);
                    for r in 0..resid.rows {
                        let (codes, _, _) = residual_quantize(resid.row(r), &[&cb]);
                        let crow = cb.row(codes[0]);
                        for j in 0..resid.cols {
                            next.data[r * resid.cols + j] = resid.at(r, j) - crow[j];
                        }
                    }
                    resid = next;
                }
            }
        }
    }

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut ep_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut ep_rng);

        let mut usage: HashMap<(Channel, usize), Vec<usize>> = HashMap::new();
        for ch in Channel::BOTH {
            for l in 0..cfg.levels {
                usage.insert((ch, l), vec![0; cfg.codebook_size]);
            }
        }
        let mut last_inputs: HashMap<(Channel, usize), Vec<Vec<f64>>> = HashMap::new();

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bs = gather_batch(&vs, chunk);
            let br = gather_batch(&vr, chunk);
            let zs = mlp_value(&params, "enc_s", n_layers, &bs);
            let zr = mlp_value(&params, "enc_r", n_layers, &br);
            let (codes_s, in_s) = quantize_batch(&params, cfg, Channel::Search, &zs);
            let (codes_r, in_r) = quantize_batch(&params, cfg, Channel::Rec, &zr);
            for l in 0..cfg.levels {
                for &c in &codes_s[l] {
                    usage.get_mut(&(Channel::Search, l)).unwrap()[c] += 1;
                }
                for &c in &codes_r[l] {
                    usage.get_mut(&(Channel::Rec, l)).unwrap()[c] += 1;
                }
                last_inputs.insert((Channel::Search, l), in_s[l].clone());
                last_inputs.insert((Channel::Rec, l), in_r[l].clone());
            }

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let parts =
                build_loss(&mut tape, &bound, cfg, &bs, &br, &codes_s, &codes_r, cfg.lambda_rq_cl);
            let total = tape.value(parts.total).item();
            if !total.is_finite() {
                return Err(QuantizerError::NanLoss { epoch, batch: bi });
            }
            sums.0 += tape.value(parts.recon).item();
            sums.1 += tape.value(parts.rq).item();
            sums.2 += parts.rq_cl.map(|v| tape.value(v).item()).unwrap_or(0.0);
            sums.3 += total;
            batches += 1;

            tape.backward(parts.total);
            let grads = bound.grads(&tape);
            params.adam_step(&grads, cfg.lr);
        }

        // dead-code restart: reseed never-used codes from in-batch residuals
        for ch in Channel::BOTH {
            for l in 0..cfg.levels {
                let counts = &usage[&(ch, l)];
                let Some(pool) = last_inputs.get(&(ch, l)) else { continue };
                if pool.is_empty() {
                    continue;
                }
                let name = format!("cb_{}.{l}", chan_tag(ch));
                let pidx = params.index_of(&name).unwrap();
                for (k, &cnt) in counts.iter().enumerate() {
                    if cnt == 0 {
                        let donor = &pool[rng.gen_range(0..pool.len())];
                        let cb = params.value_mut(pidx);
                        let d = cb.cols;
                        cb.data[k * d..(k + 1) * d].copy_from_slice(donor);
                        params.reset_moments_row(pidx, k);
                    }
                }
            }
        }

        let bf = batches.max(1) as f64;
        trace.push(EpochTrace {
            epoch,
            recon: sums.0 / bf,
            rq: sums.1 / bf,
            rq_cl: sums.2 / bf,
            total: sums.3 / bf,
        });
    }

    Ok(TrainedQuantizer { config: cfg.clone(), embed_dim: d_e, params, trace })
}

// ---- export ----

/// Per-user discrete codes for both channels plus the quantized latents.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeAssignment {
    pub user_id: usize,
    pub s: Vec<usize>,
    pub r: Vec<usize>,
    pub zhat_s: Vec<f64>,
    pub zhat_r: Vec<f64>,
}

/// Deterministic code export for every user (row index = user id).
pub fn export_codes(q: &TrainedQuantizer, vs: &[Vec<f32>], vr: &[Vec<f32>]) -> Vec<CodeAssignment> {
    let ms = to_mat(vs).expect("search embeddings");
    let mr = to_mat(vr).expect("rec embeddings");
    assert_eq!(ms.rows, mr.rows, "channel row mismatch");
    let zs = q.encode(Channel::Search, &ms);
    let zr = q.encode(Channel::Rec, &mr);
    let cbs = q.codebooks(Channel::Search);
    let cbr = q.codebooks(Channel::Rec);
    (0..ms.rows)
        .map(|u| {
            let (s, zhat_s, _) = residual_quantize(zs.row(u), &cbs);
            let (r, zhat_r, _) = residual_quantize(zr.row(u), &cbr);
            CodeAssignment { user_id: u, s, r, zhat_s, zhat_r }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct WireCodes {
    user: usize,
    s: Vec<usize>,
    r: Vec<usize>,
}

pub fn write_codes(path: &Path, codes: &[CodeAssignment]) -> Result<(), QuantizerError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for c in codes {
        let w = WireCodes { user: c.user_id, s: c.s.clone(), r: c.r.clone() };
        serde_json::to_writer(&mut out, &w).map_err(|e| QuantizerError::Codes(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a codes file; quantized latents are not persisted and come back
/// empty.
pub fn read_codes(path: &Path) -> Result<Vec<CodeAssignment>, QuantizerError> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WireCodes = serde_json::from_str(&line)
            .map_err(|e| QuantizerError::Codes(format!("line {}: {e}", ln + 1)))?;
        out.push(CodeAssignment {
            user_id: w.user,
            s: w.s,
            r: w.r,
            zhat_s: vec![],
            zhat_r: vec![],
        });
    }
    Ok(out)
}

/// exp of the Shannon entropy of the code histogram at one level; equals
/// the effective number of codes in use (1.0 means total collapse).
pub fn code_usage_perplexity(
    codes: &[CodeAssignment],
    ch: Channel,
    level: usize,
    n_codes: usize,
) -> f64 {
    let mut counts = vec![0usize; n_codes];
    for c in codes {
        let seq = match ch {
            Channel::Search => &c.s,
            Channel::Rec => &c.r,
        };
        counts[seq[level]] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h.exp()
}

// ---- checkpointing ----

pub fn save_quantizer(path: &Path, q: &TrainedQuantizer) -> Result<(), QuantizerError> {
    let config = serde_json::json!({
        "quantizer": q.config,
        "embed_dim": q.embed_dim,
        "trace": q.trace,
    });
    let tensors: Vec<(String, Mat)> =
        q.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
    save_archive(path, &Archive { kind: "quantizer".into(), config, tensors })?;
    Ok(())
}

pub fn load_quantizer(path: &Path) -> Result<TrainedQuantizer, QuantizerError> {
    let arch = load_archive(path)?;
    if arch.kind != "quantizer" {
        return Err(QuantizerError::Ckpt(CkptError::KindMismatch {
            wanted: "quantizer".into(),
            found: arch.kind,
        }));
    }
    let config: QuantizerConfig = serde_json::from_value(arch.config["quantizer"].clone())
        .map_err(|e| QuantizerError::Codes(format!("config: {e}")))?;
    let embed_dim = arch.config["embed_dim"].as_u64().unwrap_or(0) as usize;
    let trace: Vec<EpochTrace> =
        serde_json::from_value(arch.config["trace"].clone()).unwrap_or_default();
    let mut params = ParamStore::new();
    for (name, m) in arch.tensors {
        params.insert(&name, m);
    }
    Ok(TrainedQuantizer { config, embed_dim, params, trace })
}
