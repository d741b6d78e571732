//! Parameter layout and the differentiable forward pass, generic over the
//! engine scalar so the same graph serves training (`f32`) and gradient
//! checks (`f64`).

use rand::Rng;

use super::{positional_encode_values, ModelConfig};
use crate::embed::EMBED_DIM;
use crate::nn::params::xavier;
use crate::nn::{NodeId, ParamId, ParamStore, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(fan_in, fan_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        tape.linear(x, self.w, self.b)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], rng),
            l2: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], rng),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        let h = self.l1.apply(tape, x);
        let h = tape.relu(h);
        self.l2.apply(tape, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.g"), Tensor::new(1, dim, vec![1.0; dim])),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, dim)),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff: Mlp,
}

/// Node ids of the per-step outputs that do not depend on a chosen embedding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepNodes {
    pub stop_logits: NodeId,
    /// `q_hat` joined with the stop probabilities; input to every later head.
    pub joint: NodeId,
    pub embedding: NodeId,
}

#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub cfg: ModelConfig,
    floor_proj: Linear,
    inst_embed: Mlp,
    inst_proj: Linear,
    query: ParamId,
    query_proj: Option<Linear>,
    blocks: Vec<Block>,
    final_ln: Norm,
    stop: Mlp,
    embed_head: Mlp,
    cond_embed: Linear,
    translation: Mlp,
    rotation: Mlp,
    size: Mlp,
}

impl Network {
    /// Registers every parameter in `store` with a fresh initialization.
    pub fn build<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        backbone_dim: usize,
        store: &mut ParamStore<f32>,
        rng: &mut R,
    ) -> Self {
        let d = cfg.feature_dim;
        let e = cfg.embed_proj_width;
        let hh = cfg.head_hidden;
        let pe = 2 * cfg.pe_frequencies;
        let k = cfg.mol_components;
        let floor_proj = Linear::new(store, "floor.proj", backbone_dim, d, rng);
        let inst_embed = Mlp::new(store, "instance.embed", [EMBED_DIM, e, e], rng);
        let inst_proj = Linear::new(store, "instance.proj", e + 7 * pe, d, rng);
        let query = store.add("query", xavier(1, cfg.query_dim, rng));
        let query_proj = (cfg.query_dim != d)
            .then(|| Linear::new(store, "query.proj", cfg.query_dim, d, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| Block {
                ln1: Norm::new(store, &format!("layer{i}.ln1"), d),
                q: Linear::new(store, &format!("layer{i}.attn.q"), d, d, rng),
                k: Linear::new(store, &format!("layer{i}.attn.k"), d, d, rng),
                v: Linear::new(store, &format!("layer{i}.attn.v"), d, d, rng),
                o: Linear::new(store, &format!("layer{i}.attn.o"), d, d, rng),
                ln2: Norm::new(store, &format!("layer{i}.ln2"), d),
                ff: Mlp::new(store, &format!("layer{i}.ff"), [d, cfg.ff_dim, d], rng),
            })
            .collect();
        let final_ln = Norm::new(store, "final_ln", d);
        let stop = Mlp::new(store, "head.stop", [d, hh, 2], rng);
        let embed_head = Mlp::new(store, "head.embedding", [d + 2, hh, EMBED_DIM], rng);
        let cond_embed = Linear::new(store, "head.cond_embed", EMBED_DIM, e, rng);
        let base = d + 2 + e;
        let translation = Mlp::new(store, "head.translation", [base, hh, 3 * 3 * k], rng);
        let rotation = Mlp::new(store, "head.rotation", [base + 3 * pe, hh, 3 * k], rng);
        let size = Mlp::new(store, "head.size", [base + 4 * pe, hh, 3 * 3 * k], rng);
        for head in [translation, rotation, size] {
            init_mixture_head(store, head.l2, k);
        }
        Network {
            cfg: cfg.clone(),
            floor_proj,
            inst_embed,
            inst_proj,
            query,
            query_proj,
            blocks,
            final_ln,
            stop,
            embed_head,
            cond_embed,
            translation,
            rotation,
            size,
        }
    }

    /// Floor token from frozen backbone features.
    pub fn floor_token<T: Real>(&self, tape: &mut Tape<'_, T>, backbone: &[f32]) -> NodeId {
        let x = tape.input(Tensor::from_f32(1, backbone.len(), backbone));
        self.floor_proj.apply(tape, x)
    }

    /// Instance token from an embedding and a normalized transform.
    pub fn instance_token<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        embedding: &[f32],
        transform: &[f64; 7],
    ) -> NodeId {
        let h = tape.input(Tensor::from_f32(1, EMBED_DIM, embedding));
        let h = self.inst_embed.apply(tape, h);
        let h = tape.relu(h);
        let pe = tape.input(pe_tensor(transform, self.cfg.pe_frequencies));
        let joined = tape.concat_cols(&[h, pe]);
        self.inst_proj.apply(tape, joined)
    }

    fn query_token<T: Real>(&self, tape: &mut Tape<'_, T>) -> NodeId {
        let q = tape.param(self.query);
        match &self.query_proj {
            Some(p) => p.apply(tape, q),
            None => q,
        }
    }

    /// Runs the set transformer over `[floor, ctx.., query]` and evaluates the
    /// stop and embedding heads at the query position.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        floor: NodeId,
        ctx: &[NodeId],
    ) -> StepNodes {
        let mut tokens = Vec::with_capacity(ctx.len() + 2);
        tokens.push(floor);
        tokens.extend_from_slice(ctx);
        tokens.push(self.query_token(tape));
        let mut x = tape.concat_rows(&tokens);
        let n = tokens.len();
        let d = self.cfg.feature_dim;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let xn = b.ln1.apply(tape, x);
            let q = b.q.apply(tape, xn);
            let k = b.k.apply(tape, xn);
            let v = b.v.apply(tape, xn);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, scale);
                let a = tape.softmax_rows(s);
                outs.push(tape.matmul(a, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = b.o.apply(tape, cat);
            x = tape.add(x, o);
            let xn = b.ln2.apply(tape, x);
            let f = b.ff.apply(tape, xn);
            x = tape.add(x, f);
        }
        let q_out = tape.slice_rows(x, n - 1, 1);
        let q_hat = self.final_ln.apply(tape, q_out);
        let stop_logits = self.stop.apply(tape, q_hat);
        let stop_p = tape.softmax_rows(stop_logits);
        let joint = tape.concat_cols(&[q_hat, stop_p]);
        let embedding = self.embed_head.apply(tape, joint);
        StepNodes {
            stop_logits,
            joint,
            embedding,
        }
    }

    /// Projection of the chosen embedding shared by the attribute heads.
    pub fn condition<T: Real>(&self, tape: &mut Tape<'_, T>, joint: NodeId, chosen: &[f32]) -> NodeId {
        let h = tape.input(Tensor::from_f32(1, EMBED_DIM, chosen));
        let h = self.cond_embed.apply(tape, h);
        let h = tape.relu(h);
        tape.concat_cols(&[joint, h])
    }

    /// Raw translation mixture parameters, `1 x 3*3K`.
    pub fn translation_head<T: Real>(&self, tape: &mut Tape<'_, T>, cond: NodeId) -> NodeId {
        self.translation.apply(tape, cond)
    }

    /// Raw rotation mixture parameters given the translation, `1 x 3K`.
    pub fn rotation_head<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: NodeId,
        translation: [f64; 3],
    ) -> NodeId {
        let pe = tape.input(pe_tensor(&translation, self.cfg.pe_frequencies));
        let x = tape.concat_cols(&[cond, pe]);
        self.rotation.apply(tape, x)
    }

    /// Raw size mixture parameters given translation and rotation, `1 x 3*3K`.
    pub fn size_head<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: NodeId,
        translation: [f64; 3],
        rotation: f64,
    ) -> NodeId {
        let v = [translation[0], translation[1], translation[2], rotation];
        let pe = tape.input(pe_tensor(&v, self.cfg.pe_frequencies));
        let x = tape.concat_cols(&[cond, pe]);
        self.size.apply(tape, x)
    }
}

fn pe_tensor<T: Real>(values: &[f64], frequencies: usize) -> Tensor<T> {
    let v = positional_encode_values(values, frequencies);
    Tensor::row_vector(v.into_iter().map(T::lit).collect())
}

/// Starts every mixture near a spread of evenly spaced, moderately wide
/// components so early training is well conditioned.
fn init_mixture_head(store: &mut ParamStore<f32>, out: Linear, k: usize) {
    let w = store.get_mut(out.w);
    w.data.iter_mut().for_each(|x| *x *= 0.1);
    let b = store.get_mut(out.b);
    let init_log_scale = (0.5 / k as f64).ln() as f32;
    for chunk in b.data.chunks_mut(3 * k) {
        for j in 0..k {
            chunk[j] = 0.0;
            chunk[k + j] = ((j as f64 + 0.5) / k as f64) as f32;
            chunk[2 * k + j] = init_log_scale;
        }
    }
}
