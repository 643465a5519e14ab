//! Conformer encoder / Transformer decoder with weight-shared candidate
//! branches.
//!
//! Every searchable sub-module owns one buffer sized for its largest
//! candidate. Candidate `i` uses a fixed sub-slice of that buffer: the
//! leading FFN columns/rows, the leading heads and the leading dimensions of
//! each head, and the center taps of the depthwise kernel. A materialized
//! model copies exactly those slices, so its forward pass matches the
//! supernet's one-hot forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::space::{ArchSpace, DerivedArch, GroupId, GroupKind, Side};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

/// How a choice group is resolved during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pick {
    /// Mix all candidates with the given `[n]` weight vector.
    Mix(Var),
    /// Use only candidate `i`.
    Choice(usize),
}

/// Input to the encoder: `[T, F]` features and an optional frame mask
/// (`true` = valid) that must be a prefix of valid frames.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub features: &'a Tensor,
    pub mask: Option<&'a [bool]>,
}

impl<'a> ModelInput<'a> {
    pub fn new(features: &'a Tensor) -> Self {
        Self { features, mask: None }
    }
}

/// Encoder output on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[T', D]` with `T' = ⌊T/4⌋`.
    pub states: Var,
    /// Number of valid leading positions of `states`.
    pub valid: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
    width: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvModule {
    pw_in: Linear,
    dw: ParamId,
    dw_b: ParamId,
    norm: Norm,
    pw_out: Linear,
    kernel: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock {
    ffn1_norm: Norm,
    ffn1: Ffn,
    att_norm: Norm,
    att: Attn,
    conv_norm: Norm,
    conv: ConvModule,
    ffn2_norm: Norm,
    ffn2: Ffn,
    out_norm: Norm,
    /// Group positions: FD, AH, ADIM, CK.
    groups: [usize; 4],
}

#[derive(Clone, Copy, Debug)]
struct DecBlock {
    self_norm: Norm,
    self_att: Attn,
    cross_norm: Norm,
    cross_att: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
    /// Group positions: FD, AH, ADIM, cross AH, cross ADIM.
    groups: [usize; 5],
}

#[derive(Clone, Debug)]
struct Layout {
    front1: Linear,
    front2: Linear,
    enc: Vec<EncBlock>,
    ctc: Linear,
    embed: ParamId,
    dec: Vec<DecBlock>,
    dec_norm: Norm,
    out: Linear,
}

enum Init {
    Weight(usize, usize),
    Zeros,
    Ones,
    Embedding,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Weight(fan_in, fan_out) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, bound, self.rng)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Embedding => Tensor::uniform(shape, 1.0, self.rng),
        };
        self.params.push(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.w"), &[fan_in, fan_out], Init::Weight(fan_in, fan_out)),
            b: self.tensor(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), &[d], Init::Ones),
            b: self.tensor(format!("{name}.b"), &[d], Init::Zeros),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, width: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, width),
            down: self.linear(&format!("{name}.down"), width, d),
            width,
        }
    }

    fn attn(&mut self, name: &str, d: usize, heads: usize, head_dim: usize) -> Attn {
        let inner = heads * head_dim;
        Attn {
            q: self.linear(&format!("{name}.q"), d, inner),
            k: self.linear(&format!("{name}.k"), d, inner),
            v: self.linear(&format!("{name}.v"), d, inner),
            o: self.linear(&format!("{name}.o"), inner, d),
            heads,
            head_dim,
        }
    }
}

/// A Conformer encoder-decoder over an [`ArchSpace`]. With a singleton
/// space this is an ordinary (materialized) model.
#[derive(Clone, Debug)]
pub struct ConformerModel {
    space: ArchSpace,
    params: ParamSet,
    layout: Layout,
}

impl PartialEq for ConformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space && self.params == other.params
    }
}

/// Whether a materialized model copies the supernet's slices or draws new
/// weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaterializeInit {
    Inherit,
    Fresh { seed: u64 },
}

impl ConformerModel {
    /// Randomly initialized model; deterministic in `seed`.
    pub fn new(space: ArchSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let d = space.d_model;
        let f = space.feat_dim;
        let v = space.vocab;
        let groups = space.groups();
        let pos = |side, block, kind| {
            groups
                .iter()
                .position(|g: &GroupId| g.side == side && g.block == block && g.kind == kind)
        };

        let front1 = b.linear("front.conv1", 2 * f, d);
        let front2 = b.linear("front.conv2", 2 * d, d);
        let mut enc = Vec::new();
        for (i, bs) in space.encoder.iter().enumerate() {
            let name = |s: &str| format!("enc.{i}.{s}");
            let fd = bs.max(GroupKind::Fd);
            let kmax = bs.max(GroupKind::Ck);
            let ffn1_norm = b.norm(&name("ffn1_norm"), d);
            let ffn1 = b.ffn(&name("ffn1"), d, fd);
            let att_norm = b.norm(&name("att_norm"), d);
            let att = b.attn(&name("att"), d, bs.max(GroupKind::Ah), bs.max(GroupKind::Adim));
            let conv_norm = b.norm(&name("conv_norm"), d);
            let conv = ConvModule {
                pw_in: b.linear(&name("conv.pw_in"), d, 2 * d),
                dw: b.tensor(name("conv.dw.w"), &[d, kmax], Init::Weight(kmax, kmax)),
                dw_b: b.tensor(name("conv.dw.b"), &[d], Init::Zeros),
                norm: b.norm(&name("conv.norm"), d),
                pw_out: b.linear(&name("conv.pw_out"), d, d),
                kernel: kmax,
            };
            let ffn2_norm = b.norm(&name("ffn2_norm"), d);
            let ffn2 = b.ffn(&name("ffn2"), d, fd);
            let out_norm = b.norm(&name("out_norm"), d);
            let g = |k| pos(Side::Encoder, i, k).expect("encoder group");
            enc.push(EncBlock {
                ffn1_norm,
                ffn1,
                att_norm,
                att,
                conv_norm,
                conv,
                ffn2_norm,
                ffn2,
                out_norm,
                groups: [g(GroupKind::Fd), g(GroupKind::Ah), g(GroupKind::Adim), g(GroupKind::Ck)],
            });
        }
        let ctc = b.linear("ctc", d, v);
        let embed = b.tensor("dec.embed".into(), &[v, d], Init::Embedding);
        let mut dec = Vec::new();
        for (i, bs) in space.decoder.iter().enumerate() {
            let name = |s: &str| format!("dec.{i}.{s}");
            let (xah, xadim) = bs.cross_lists();
            let self_norm = b.norm(&name("self_norm"), d);
            let self_att = b.attn(&name("self_att"), d, bs.max(GroupKind::Ah), bs.max(GroupKind::Adim));
            let cross_norm = b.norm(&name("cross_norm"), d);
            let cross_att = b.attn(&name("cross_att"), d, *xah.last().unwrap(), *xadim.last().unwrap());
            let ffn_norm = b.norm(&name("ffn_norm"), d);
            let ffn = b.ffn(&name("ffn"), d, bs.max(GroupKind::Fd));
            let g = |k| pos(Side::Decoder, i, k);
            let (ah, adim) = (g(GroupKind::Ah).unwrap(), g(GroupKind::Adim).unwrap());
            dec.push(DecBlock {
                self_norm,
                self_att,
                cross_norm,
                cross_att,
                ffn_norm,
                ffn,
                groups: [
                    g(GroupKind::Fd).unwrap(),
                    ah,
                    adim,
                    g(GroupKind::CrossAh).unwrap_or(ah),
                    g(GroupKind::CrossAdim).unwrap_or(adim),
                ],
            });
        }
        let dec_norm = b.norm("dec.norm", d);
        let out = b.linear("out", d, v);

        Ok(Self {
            space,
            params: b.params,
            layout: Layout {
                front1,
                front2,
                enc,
                ctc,
                embed,
                dec,
                dec_norm,
                out,
            },
        })
    }

    /// Rebuilds a model from saved parameters, checking names and shapes
    /// against the layout implied by `space`.
    pub fn from_params(space: ArchSpace, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(space, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "space expects {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter `{n2}` {:?} does not match expected `{n1}` {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn space(&self) -> &ArchSpace {
        &self.space
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Number of scalar parameters stored.
    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    /// Ids of the output layers (CTC head and decoder output projection).
    pub fn output_layer_ids(&self) -> [ParamId; 4] {
        let l = &self.layout;
        [l.ctc.w, l.ctc.b, l.out.w, l.out.b]
    }

    /// Redraws the output layers from `seed`.
    pub fn reinit_output_layers(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (self.space.d_model, self.space.vocab);
        let bound = (6.0 / (d + v) as f64).sqrt();
        for lin in [self.layout.ctc, self.layout.out] {
            *self.params.get_mut(lin.w) = Tensor::uniform(&[d, v], bound, &mut rng);
            *self.params.get_mut(lin.b) = Tensor::zeros(&[v]);
        }
    }

    /// Picks selecting `arch` in every group.
    pub fn choice_picks(&self, arch: &DerivedArch) -> Result<Vec<Pick>> {
        Ok(self.space.indices_of(arch)?.into_iter().map(Pick::Choice).collect())
    }

    /// Standalone model holding exactly the slices `arch` uses.
    pub fn materialize(&self, arch: &DerivedArch, init: MaterializeInit) -> Result<ConformerModel> {
        let space = self.space.singleton(arch)?;
        match init {
            MaterializeInit::Fresh { seed } => ConformerModel::new(space, seed),
            MaterializeInit::Inherit => {
                let mut m = ConformerModel::new(space, 0)?;
                m.inherit_from(self)?;
                Ok(m)
            }
        }
    }

    fn inherit_from(&mut self, src: &ConformerModel) -> Result<()> {
        let dst_layout = self.layout.clone();
        let sp = &src.params;
        let copy = |dst: &mut ParamSet, d: ParamId, s: ParamId| {
            *dst.get_mut(d) = sp.get(s).clone();
        };
        let lin = |dst: &mut ParamSet, d: Linear, s: Linear| {
            copy(dst, d.w, s.w);
            copy(dst, d.b, s.b);
        };
        let norm = |dst: &mut ParamSet, d: Norm, s: Norm| {
            copy(dst, d.g, s.g);
            copy(dst, d.b, s.b);
        };
        let ffn = |dst: &mut ParamSet, d: Ffn, s: Ffn| {
            *dst.get_mut(d.up.w) = lead_cols(sp.get(s.up.w), d.width);
            *dst.get_mut(d.up.b) = lead_cols(sp.get(s.up.b), d.width);
            *dst.get_mut(d.down.w) = lead_rows(sp.get(s.down.w), d.width);
            copy(dst, d.down.b, s.down.b);
        };
        let attn = |dst: &mut ParamSet, d: Attn, s: Attn| {
            for (dl, sl) in [(d.q, s.q), (d.k, s.k), (d.v, s.v)] {
                *dst.get_mut(dl.w) = head_cols(sp.get(sl.w), s.head_dim, d.heads, d.head_dim);
                *dst.get_mut(dl.b) = head_cols(sp.get(sl.b), s.head_dim, d.heads, d.head_dim);
            }
            *dst.get_mut(d.o.w) = head_rows(sp.get(s.o.w), s.head_dim, d.heads, d.head_dim);
            copy(dst, d.o.b, s.o.b);
        };

        let sl = &src.layout;
        let dst = &mut self.params;
        lin(dst, dst_layout.front1, sl.front1);
        lin(dst, dst_layout.front2, sl.front2);
        for (d, s) in dst_layout.enc.iter().zip(&sl.enc) {
            norm(dst, d.ffn1_norm, s.ffn1_norm);
            ffn(dst, d.ffn1, s.ffn1);
            norm(dst, d.att_norm, s.att_norm);
            attn(dst, d.att, s.att);
            norm(dst, d.conv_norm, s.conv_norm);
            lin(dst, d.conv.pw_in, s.conv.pw_in);
            *dst.get_mut(d.conv.dw) = center_cols(sp.get(s.conv.dw), d.conv.kernel);
            copy(dst, d.conv.dw_b, s.conv.dw_b);
            norm(dst, d.conv.norm, s.conv.norm);
            lin(dst, d.conv.pw_out, s.conv.pw_out);
            norm(dst, d.ffn2_norm, s.ffn2_norm);
            ffn(dst, d.ffn2, s.ffn2);
            norm(dst, d.out_norm, s.out_norm);
        }
        lin(dst, dst_layout.ctc, sl.ctc);
        copy(dst, dst_layout.embed, sl.embed);
        for (d, s) in dst_layout.dec.iter().zip(&sl.dec) {
            norm(dst, d.self_norm, s.self_norm);
            attn(dst, d.self_att, s.self_att);
            norm(dst, d.cross_norm, s.cross_norm);
            attn(dst, d.cross_att, s.cross_att);
            norm(dst, d.ffn_norm, s.ffn_norm);
            ffn(dst, d.ffn, s.ffn);
        }
        norm(dst, dst_layout.dec_norm, sl.dec_norm);
        lin(dst, dst_layout.out, sl.out);
        Ok(())
    }

    /// Registers all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.register(tape, requires_grad)
    }

    fn check_picks(&self, tape: &Tape, picks: &[Pick]) -> Result<()> {
        let groups = self.space.groups();
        if picks.len() != groups.len() {
            return Err(Error::invalid(format!(
                "expected {} group picks, got {}",
                groups.len(),
                picks.len()
            )));
        }
        for (g, pick) in groups.iter().zip(picks) {
            let n = self.space.choices(g).len();
            match *pick {
                Pick::Choice(i) if i >= n => {
                    return Err(Error::invalid(format!("choice {i} out of range for {g}")));
                }
                Pick::Mix(v) => {
                    if tape.shape(v) != [n] {
                        return Err(Error::dim("mixing weights", tape.shape(v), &[n]));
                    }
                    let w = tape.value(v).data();
                    let total: f64 = w.iter().sum();
                    if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid(format!(
                            "mixing weights for {g} are not normalized (sum {total})"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs the front-end and encoder blocks.
    pub fn encode(&self, tape: &mut Tape, w: &[Var], picks: &[Pick], input: ModelInput<'_>) -> Result<Encoded> {
        self.check_picks(tape, picks)?;
        let feats = input.features;
        if feats.rank() != 2 || feats.cols() != self.space.feat_dim {
            return Err(Error::dim(
                "encode",
                feats.shape(),
                &[feats.shape()[0], self.space.feat_dim],
            ));
        }
        let t = feats.rows();
        let t4 = t / 4;
        if t4 == 0 {
            return Err(Error::invalid(format!("utterance of {t} frames is shorter than 4")));
        }
        let valid_frames = match input.mask {
            None => t,
            Some(mask) => {
                if mask.len() != t {
                    return Err(Error::dim("encode mask", feats.shape(), &[mask.len()]));
                }
                let n = mask.iter().take_while(|&&m| m).count();
                if mask[n..].iter().any(|&m| m) {
                    return Err(Error::invalid("frame mask must be a prefix of valid frames"));
                }
                n
            }
        };
        let valid = valid_frames / 4;
        if valid == 0 {
            return Err(Error::invalid("fewer than 4 valid frames"));
        }
        let key_mask: Option<Vec<bool>> = (valid < t4).then(|| (0..t4 * t4).map(|i| i % t4 >= valid).collect());

        let (d, f) = (self.space.d_model, self.space.feat_dim);
        let l = &self.layout;
        let mut x = tape.constant(feats.clone());
        if t4 * 4 != t {
            x = tape.slice(x, 0, 0, t4 * 4)?;
        }
        x = tape.reshape(x, &[t4 * 2, 2 * f])?;
        x = linear(tape, w, x, l.front1)?;
        x = tape.swish(x);
        x = tape.reshape(x, &[t4, 2 * d])?;
        x = linear(tape, w, x, l.front2)?;
        x = tape.swish(x);
        let pe = tape.constant(positional_encoding(t4, d));
        x = tape.add(x, pe)?;

        for (bi, blk) in l.enc.iter().enumerate() {
            let bs = &self.space.encoder[bi];
            let [gfd, gah, gadim, gck] = blk.groups;

            let h = norm(tape, w, x, blk.ffn1_norm)?;
            let h = self.ffn(tape, w, h, blk.ffn1, picks[gfd], &bs.fd)?;
            let h = tape.scale(h, 0.5);
            x = tape.add(x, h)?;

            let h = norm(tape, w, x, blk.att_norm)?;
            let h = self.attention(
                tape,
                w,
                blk.att,
                h,
                h,
                key_mask.as_deref(),
                (picks[gah], &bs.ah),
                (picks[gadim], &bs.adim),
            )?;
            x = tape.add(x, h)?;

            let h = norm(tape, w, x, blk.conv_norm)?;
            let h = self.conv_module(tape, w, h, blk.conv, picks[gck], &bs.ck, valid)?;
            x = tape.add(x, h)?;

            let h = norm(tape, w, x, blk.ffn2_norm)?;
            let h = self.ffn(tape, w, h, blk.ffn2, picks[gfd], &bs.fd)?;
            let h = tape.scale(h, 0.5);
            x = tape.add(x, h)?;

            x = norm(tape, w, x, blk.out_norm)?;
        }
        Ok(Encoded { states: x, valid })
    }

    /// CTC log-posteriors `[valid, V]` of the encoder output.
    pub fn ctc_log_probs(&self, tape: &mut Tape, w: &[Var], enc: &Encoded) -> Result<Var> {
        let mut x = enc.states;
        if enc.valid < tape.shape(x)[0] {
            x = tape.slice(x, 0, 0, enc.valid)?;
        }
        let logits = linear(tape, w, x, self.layout.ctc)?;
        tape.log_softmax(logits, 1)
    }

    /// Teacher-forced decoder logits `[n, V]` for input tokens `prefix`
    /// (starting with the sentinel).
    pub fn decode(&self, tape: &mut Tape, w: &[Var], picks: &[Pick], enc: &Encoded, prefix: &[usize]) -> Result<Var> {
        self.check_picks(tape, picks)?;
        let n = prefix.len();
        let d = self.space.d_model;
        let l = &self.layout;
        let te = tape.shape(enc.states)[0];
        let causal: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
        let cross_mask: Option<Vec<bool>> =
            (enc.valid < te).then(|| (0..n * te).map(|i| i % te >= enc.valid).collect());

        let mut y = tape.embedding(w[l.embed.0], prefix)?;
        let pe = tape.constant(positional_encoding(n, d));
        y = tape.add(y, pe)?;
        for (bi, blk) in l.dec.iter().enumerate() {
            let bs = &self.space.decoder[bi];
            let [gfd, gah, gadim, gxah, gxadim] = blk.groups;
            let (xah, xadim) = bs.cross_lists();

            let h = norm(tape, w, y, blk.self_norm)?;
            let h = self.attention(
                tape,
                w,
                blk.self_att,
                h,
                h,
                Some(&causal),
                (picks[gah], &bs.ah),
                (picks[gadim], &bs.adim),
            )?;
            y = tape.add(y, h)?;

            let h = norm(tape, w, y, blk.cross_norm)?;
            let h = self.attention(
                tape,
                w,
                blk.cross_att,
                h,
                enc.states,
                cross_mask.as_deref(),
                (picks[gxah], xah),
                (picks[gxadim], xadim),
            )?;
            y = tape.add(y, h)?;

            let h = norm(tape, w, y, blk.ffn_norm)?;
            let h = self.ffn(tape, w, h, blk.ffn, picks[gfd], &bs.fd)?;
            y = tape.add(y, h)?;
        }
        y = norm(tape, w, y, l.dec_norm)?;
        linear(tape, w, y, l.out)
    }

    fn ffn(&self, tape: &mut Tape, w: &[Var], x: Var, p: Ffn, pick: Pick, choices: &[usize]) -> Result<Var> {
        match pick {
            Pick::Mix(lambda) => {
                // Σ_i λ_i · down_i(swish(up_i x)) == down((swish(up x)) ⊙ m),
                // m_j = Σ_{i: j < fd_i} λ_i
                let h = linear(tape, w, x, p.up)?;
                let h = tape.swish(h);
                let m = prefix_weights(tape, lambda, choices, p.width)?;
                let h = tape.mul(h, m)?;
                linear(tape, w, h, p.down)
            }
            Pick::Choice(i) => {
                let fd = choices[i];
                let up_w = lead(tape, w[p.up.w.0], 1, fd, p.width)?;
                let up_b = lead(tape, w[p.up.b.0], 0, fd, p.width)?;
                let down_w = lead(tape, w[p.down.w.0], 0, fd, p.width)?;
                let h = tape.matmul(x, up_w)?;
                let h = tape.add(h, up_b)?;
                let h = tape.swish(h);
                let h = tape.matmul(h, down_w)?;
                tape.add(h, w[p.down.b.0])
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        w: &[Var],
        p: Attn,
        query: Var,
        memory: Var,
        mask: Option<&[bool]>,
        heads: (Pick, &[usize]),
        dims: (Pick, &[usize]),
    ) -> Result<Var> {
        let q = linear(tape, w, query, p.q)?;
        let k = linear(tape, w, memory, p.k)?;
        let v = linear(tape, w, memory, p.v)?;

        // per-head weight (mixed) or number of active heads (choice)
        let (active, head_w): (usize, Option<Vec<Var>>) = match heads.0 {
            Pick::Mix(lambda) => {
                let m = prefix_weights(tape, lambda, heads.1, p.heads)?;
                let ws = (0..p.heads)
                    .map(|h| tape.slice(m, 0, h, 1))
                    .collect::<Result<Vec<_>>>()?;
                (p.heads, Some(ws))
            }
            Pick::Choice(i) => (heads.1[i], None),
        };
        let dim_sel: Vec<(usize, Option<Var>)> = match dims.0 {
            Pick::Mix(lambda) => dims
                .1
                .iter()
                .enumerate()
                .map(|(j, &a)| Ok((a, Some(tape.slice(lambda, 0, j, 1)?))))
                .collect::<Result<_>>()?,
            Pick::Choice(j) => vec![(dims.1[j], None)],
        };

        let mut acc: Option<Var> = None;
        for h in 0..active {
            for &(a, wa) in &dim_sel {
                let off = h * p.head_dim;
                let qh = tape.slice(q, 1, off, a)?;
                let kh = tape.slice(k, 1, off, a)?;
                let vh = tape.slice(v, 1, off, a)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let mut s = tape.scale(s, 1.0 / (a as f64).sqrt());
                if let Some(mask) = mask {
                    s = tape.masked_fill(s, mask, MASKED)?;
                }
                let att = tape.softmax(s, 1)?;
                let ctx = tape.matmul(att, vh)?;
                let wo = tape.slice(w[p.o.w.0], 0, off, a)?;
                let mut out = tape.matmul(ctx, wo)?;
                let weight = match (head_w.as_ref().map(|ws| ws[h]), wa) {
                    (Some(x), Some(y)) => Some(tape.mul(x, y)?),
                    (x, y) => x.or(y),
                };
                if let Some(s) = weight {
                    out = tape.scale_by(out, s)?;
                }
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, out)?,
                    None => out,
                });
            }
        }
        tape.add(acc.expect("at least one head"), w[p.o.b.0])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_module(
        &self,
        tape: &mut Tape,
        w: &[Var],
        x: Var,
        p: ConvModule,
        pick: Pick,
        choices: &[usize],
        valid: usize,
    ) -> Result<Var> {
        let h = linear(tape, w, x, p.pw_in)?;
        let mut h = tape.glu(h)?;
        let t = tape.shape(h)[0];
        if valid < t {
            let d = self.space.d_model;
            let pad: Vec<bool> = (0..t * d).map(|i| i / d >= valid).collect();
            h = tape.masked_fill(h, &pad, 0.0)?;
        }
        let h = self.depthwise(tape, w, h, p, pick, choices)?;
        let h = norm(tape, w, h, p.norm)?;
        let h = tape.swish(h);
        linear(tape, w, h, p.pw_out)
    }

    /// Depthwise convolution plus bias, the searched part of the conv module.
    /// Mixing branch outputs equals convolving with the mixed kernel.
    fn depthwise(
        &self,
        tape: &mut Tape,
        w: &[Var],
        h: Var,
        p: ConvModule,
        pick: Pick,
        choices: &[usize],
    ) -> Result<Var> {
        let kernel = match pick {
            Pick::Mix(lambda) => {
                // tap j of the widest kernel belongs to every candidate whose
                // centered window covers it
                let kmax = p.kernel;
                let coverage: Vec<Vec<f64>> = choices
                    .iter()
                    .map(|&k| {
                        let lo = (kmax - k) / 2;
                        (0..kmax).map(|j| f64::from(u8::from(j >= lo && j < lo + k))).collect()
                    })
                    .collect();
                let m = mix_rows(tape, lambda, &coverage)?;
                tape.mul(w[p.dw.0], m)?
            }
            Pick::Choice(i) => {
                let k = choices[i];
                if k == p.kernel {
                    w[p.dw.0]
                } else {
                    tape.slice(w[p.dw.0], 1, (p.kernel - k) / 2, k)?
                }
            }
        };
        let h = tape.depthwise_conv1d(h, kernel)?;
        tape.add(h, w[p.dw_b.0])
    }
}

fn linear(tape: &mut Tape, w: &[Var], x: Var, p: Linear) -> Result<Var> {
    let y = tape.matmul(x, w[p.w.0])?;
    tape.add(y, w[p.b.0])
}

fn norm(tape: &mut Tape, w: &[Var], x: Var, p: Norm) -> Result<Var> {
    tape.layer_norm(x, w[p.g.0], w[p.b.0], LN_EPS)
}

/// Leading `n` of `full` entries along `axis`, skipping the op when whole.
fn lead(tape: &mut Tape, x: Var, axis: usize, n: usize, full: usize) -> Result<Var> {
    if n == full {
        Ok(x)
    } else {
        tape.slice(x, axis, 0, n)
    }
}

/// `m_j = Σ_{i: j < choices_i} λ_i` for `j < width`, as a `[width]` tensor.
fn prefix_weights(tape: &mut Tape, lambda: Var, choices: &[usize], width: usize) -> Result<Var> {
    let rows: Vec<Vec<f64>> = choices
        .iter()
        .map(|&c| (0..width).map(|j| f64::from(u8::from(j < c))).collect())
        .collect();
    mix_rows(tape, lambda, &rows)
}

/// `λᵀ · rows`, reshaped to a vector.
fn mix_rows(tape: &mut Tape, lambda: Var, rows: &[Vec<f64>]) -> Result<Var> {
    let n = rows.len();
    let width = rows[0].len();
    if tape.shape(lambda) != [n] {
        return Err(Error::dim("mixing weights", tape.shape(lambda), &[n]));
    }
    let c = tape.constant(Tensor::new(vec![n, width], rows.concat())?);
    let l = tape.reshape(lambda, &[1, n])?;
    let m = tape.matmul(l, c)?;
    tape.reshape(m, &[width])
}

/// Fixed sinusoidal absolute position encodings `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("positional encoding shape")
}

fn lead_cols(t: &Tensor, n: usize) -> Tensor {
    let cols = t.cols();
    let rows = t.numel() / cols;
    let data: Vec<f64> = (0..rows)
        .flat_map(|r| t.data()[r * cols..r * cols + n].iter().copied())
        .collect();
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, data).expect("lead_cols")
}

fn lead_rows(t: &Tensor, n: usize) -> Tensor {
    let cols = t.cols();
    Tensor::new(vec![n, cols], t.data()[..n * cols].to_vec()).expect("lead_rows")
}

/// Columns `{h·src_dim + j : h < heads, j < dim}` packed contiguously.
fn head_cols(t: &Tensor, src_dim: usize, heads: usize, dim: usize) -> Tensor {
    let cols = t.cols();
    let rows = t.numel() / cols;
    let mut data = Vec::with_capacity(rows * heads * dim);
    for r in 0..rows {
        for h in 0..heads {
            let start = r * cols + h * src_dim;
            data.extend_from_slice(&t.data()[start..start + dim]);
        }
    }
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = heads * dim;
    Tensor::new(shape, data).expect("head_cols")
}

fn head_rows(t: &Tensor, src_dim: usize, heads: usize, dim: usize) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(heads * dim * cols);
    for h in 0..heads {
        let start = h * src_dim * cols;
        data.extend_from_slice(&t.data()[start..start + dim * cols]);
    }
    Tensor::new(vec![heads * dim, cols], data).expect("head_rows")
}

fn center_cols(t: &Tensor, k: usize) -> Tensor {
    let cols = t.cols();
    let lo = (cols - k) / 2;
    let rows = t.rows();
    let data: Vec<f64> = (0..rows)
        .flat_map(|r| t.data()[r * cols + lo..r * cols + lo + k].iter().copied())
        .collect();
    Tensor::new(vec![rows, k], data).expect("center_cols")
}
