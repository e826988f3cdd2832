use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::embed::{fourier_frequencies, fourier_into};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    /// Value and derivative at `a`, sharing one exponential.
    #[inline]
    fn apply_with_grad(self, a: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-a).exp());
                (a * sig, sig * (1.0 + a * (1.0 - sig)))
            }
            Activation::Relu => (a.max(0.0), if a > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

/// Architecture of a conditioned dense network.
///
/// The conditioning embedding is `act(Σ_j F(t_j) P_j + b + C[label])` where
/// `F` are Fourier features, one projection `P_j` per time input, and `C` is
/// a class table with `n_classes + 1` rows (the last row is the null class).
/// With FiLM enabled every hidden layer is modulated by linear maps of the
/// embedding; otherwise the embedding is concatenated to the first layer's
/// input. Layer `l < cond_dims.len()` additionally receives an external
/// conditioning matrix concatenated to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub time_embed_dim: usize,
    /// Number of time inputs whose embeddings are projected and summed.
    pub n_times: usize,
    /// Number of real classes; 0 disables the class table.
    pub n_classes: usize,
    pub film_enabled: bool,
    pub cond_dims: Vec<usize>,
}

impl MlpSpec {
    /// An unconditioned MLP.
    pub fn plain(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Silu,
            time_embed_dim: 0,
            n_times: 0,
            n_classes: 0,
            film_enabled: false,
            cond_dims: Vec::new(),
        }
    }

    pub fn has_embedding(&self) -> bool {
        self.n_times > 0 || self.n_classes > 0
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_dims.len()
    }

    fn film_active(&self) -> bool {
        self.film_enabled && self.has_embedding() && !self.hidden_dims.is_empty()
    }

    /// Whether the embedding is concatenated to the first layer input.
    fn embed_concat(&self) -> bool {
        self.has_embedding() && !self.film_active()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("mlp dimensions must be at least 1"));
        }
        if self.cond_dims.len() > self.hidden_dims.len() {
            return Err(Error::config(format!(
                "{} conditioning levels but only {} hidden layers",
                self.cond_dims.len(),
                self.hidden_dims.len()
            )));
        }
        if self.cond_dims.contains(&0) {
            return Err(Error::config("conditioning widths must be at least 1"));
        }
        if self.has_embedding() {
            if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
                return Err(Error::config(format!(
                    "time_embed_dim must be even and positive, got {}",
                    self.time_embed_dim
                )));
            }
        } else if self.film_enabled {
            return Err(Error::config("film requires a time or class embedding"));
        }
        Ok(())
    }

    /// Width of the matrix entering hidden layer `l` (or the head when `l`
    /// equals the number of hidden layers).
    pub fn layer_input_width(&self, l: usize) -> usize {
        let prev = if l == 0 {
            self.input_dim
        } else {
            self.hidden_dims[l - 1]
        };
        let embed = if l == 0 && self.embed_concat() {
            self.time_embed_dim
        } else {
            0
        };
        let cond = self.cond_dims.get(l).copied().unwrap_or(0);
        prev + embed + cond
    }

    pub fn layout(&self) -> MlpLayout {
        MlpLayout::build(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn zero_params(&self) -> ParamVector {
        let layout = self.layout();
        ParamVector {
            values: vec![0.0; layout.total],
            layout: layout.named,
        }
    }

    /// He-scaled Gaussian weights, zero biases, zero FiLM projections.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let layout = self.layout();
        let mut values = vec![0.0; layout.total];
        let mut fill = |slot: &Slot, std: f64| {
            for v in &mut values[slot.offset..slot.offset + slot.len()] {
                let n: f64 = StandardNormal.sample(rng);
                *v = n * std;
            }
        };
        for p in &layout.time_proj {
            fill(p, (2.0 / p.rows as f64).sqrt());
        }
        if let Some(c) = &layout.class_table {
            fill(c, 1.0);
        }
        for layer in &layout.hidden {
            fill(&layer.w, (2.0 / layer.w.rows as f64).sqrt());
        }
        fill(&layout.out_w, (2.0 / layout.out_w.rows as f64).sqrt());
        ParamVector {
            values,
            layout: layout.named,
        }
    }
}

/// A contiguous `rows × cols` row-major tensor inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlots {
    pub w: Slot,
    pub b: Slot,
    /// `[scale_w, scale_b, shift_w, shift_b]` when FiLM is active.
    pub film: Option<[Slot; 4]>,
}

/// Typed offset table for an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayout {
    pub time_proj: Vec<Slot>,
    pub embed_bias: Option<Slot>,
    pub class_table: Option<Slot>,
    pub hidden: Vec<LayerSlots>,
    pub out_w: Slot,
    pub out_b: Slot,
    pub total: usize,
    named: Vec<(String, Slot)>,
}

impl MlpLayout {
    fn build(spec: &MlpSpec) -> Self {
        let mut offset = 0usize;
        let mut named = Vec::new();
        let mut take = |name: String, rows: usize, cols: usize| {
            let slot = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, slot));
            slot
        };
        let e = spec.time_embed_dim;
        let mut time_proj = Vec::new();
        let mut embed_bias = None;
        let mut class_table = None;
        if spec.has_embedding() {
            for j in 0..spec.n_times {
                time_proj.push(take(format!("time_proj.{j}.w"), e, e));
            }
            embed_bias = Some(take("embed.b".into(), 1, e));
            if spec.n_classes > 0 {
                class_table = Some(take("class_table".into(), spec.n_classes + 1, e));
            }
        }
        let film = spec.film_active();
        let mut hidden = Vec::new();
        for (l, &width) in spec.hidden_dims.iter().enumerate() {
            let w = take(format!("layer.{l}.w"), spec.layer_input_width(l), width);
            let b = take(format!("layer.{l}.b"), 1, width);
            let film_slots = film.then(|| {
                [
                    take(format!("layer.{l}.film_scale.w"), e, width),
                    take(format!("layer.{l}.film_scale.b"), 1, width),
                    take(format!("layer.{l}.film_shift.w"), e, width),
                    take(format!("layer.{l}.film_shift.b"), 1, width),
                ]
            });
            hidden.push(LayerSlots {
                w,
                b,
                film: film_slots,
            });
        }
        let head_in = spec.layer_input_width(spec.hidden_dims.len());
        let out_w = take("out.w".into(), head_in, spec.output_dim);
        let out_b = take("out.b".into(), 1, spec.output_dim);
        Self {
            time_proj,
            embed_bias,
            class_table,
            hidden,
            out_w,
            out_b,
            total: offset,
            named,
        }
    }
}

/// Flat parameter storage with a named offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<(String, Slot)>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.layout.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 29;
        }
        h ^ self.values.len() as u64
    }

    fn mat(&self, slot: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (slot.rows, slot.cols),
            &self.values[slot.offset..slot.offset + slot.len()],
        )
        .expect("slot within layout")
    }

    fn row(&self, slot: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[slot.offset..slot.offset + slot.len()])
    }

    fn mat_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape(
            (slot.rows, slot.cols),
            &mut self.values[slot.offset..slot.offset + slot.len()],
        )
        .expect("slot within layout")
    }
}

/// Inputs of one forward pass.
///
/// Each entry of `times` holds either one value shared by the batch or one
/// value per row. `labels` use `n_classes` as the null class.
#[derive(Debug, Clone, Copy)]
pub struct MlpInput<'a> {
    pub x: ArrayView2<'a, f64>,
    pub times: &'a [Vec<f64>],
    pub labels: Option<&'a [usize]>,
    pub cond: &'a [Array2<f64>],
}

impl<'a> MlpInput<'a> {
    pub fn plain(x: ArrayView2<'a, f64>) -> Self {
        Self {
            x,
            times: &[],
            labels: None,
            cond: &[],
        }
    }
}

/// Everything a backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    spec: MlpSpec,
    fingerprint: u64,
    time_feats: Vec<Array2<f64>>,
    labels: Option<Vec<usize>>,
    embed_grad: Option<Array2<f64>>,
    embed: Option<Array2<f64>>,
    layer_inputs: Vec<Array2<f64>>,
    pre_film: Vec<Array2<f64>>,
    film: Vec<Option<(Array2<f64>, Array2<f64>)>>,
    act_grad: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    head_input: Array2<f64>,
    hidden_out: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn batch(&self) -> usize {
        self.head_input.nrows()
    }

    /// Post-activation (post-dropout) output of hidden layer `l`.
    pub fn hidden_output(&self, l: usize) -> &Array2<f64> {
        &self.hidden_out[l]
    }
}

/// Gradients produced by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub params: ParamVector,
    pub input: Array2<f64>,
    pub cond: Vec<Array2<f64>>,
}

fn activate(act: Activation, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut h = Array2::zeros(a.raw_dim());
    let mut d = Array2::zeros(a.raw_dim());
    Zip::from(&mut h).and(&mut d).and(a).for_each(|h, d, &v| {
        (*h, *d) = act.apply_with_grad(v);
    });
    (h, d)
}

fn check_finite(a: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite entries")))
    }
}

/// Forward pass. Returns the output batch and the tape for [`mlp_backward`].
///
/// `dropout` enables inverted dropout on hidden activations at the given rate.
pub fn mlp_forward<R: Rng + ?Sized>(
    spec: &MlpSpec,
    params: &ParamVector,
    input: MlpInput<'_>,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Array2<f64>, MlpTape)> {
    spec.validate()?;
    let layout = spec.layout();
    if params.len() != layout.total {
        return Err(Error::shape(format!(
            "parameter vector has {} entries, spec needs {}",
            params.len(),
            layout.total
        )));
    }
    let batch = input.x.nrows();
    if input.x.ncols() != spec.input_dim {
        return Err(Error::shape(format!(
            "input has {} columns, spec expects {}",
            input.x.ncols(),
            spec.input_dim
        )));
    }
    check_finite(input.x, "network input")?;
    if input.times.len() != spec.n_times {
        return Err(Error::shape(format!(
            "{} time inputs given, spec expects {}",
            input.times.len(),
            spec.n_times
        )));
    }
    for t in input.times {
        if t.len() != 1 && t.len() != batch {
            return Err(Error::shape(format!(
                "time input of length {} for batch {batch}",
                t.len()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time input".into()));
        }
    }
    let labels = match (spec.n_classes, input.labels) {
        (0, _) => None,
        (n, Some(l)) => {
            if l.len() != batch {
                return Err(Error::shape(format!(
                    "{} labels for batch {batch}",
                    l.len()
                )));
            }
            if let Some(bad) = l.iter().find(|&&c| c > n) {
                return Err(Error::Invalid(format!("label {bad} outside 0..={n}")));
            }
            Some(l.to_vec())
        }
        (n, None) => Some(vec![n; batch]),
    };
    if input.cond.len() != spec.cond_dims.len() {
        return Err(Error::shape(format!(
            "{} conditioning levels given, spec expects {}",
            input.cond.len(),
            spec.cond_dims.len()
        )));
    }
    for (c, &w) in input.cond.iter().zip(&spec.cond_dims) {
        if c.dim() != (batch, w) {
            return Err(Error::shape(format!(
                "conditioning level is {:?}, expected ({batch}, {w})",
                c.dim()
            )));
        }
        check_finite(c.view(), "conditioning features")?;
    }

    let act = spec.activation;
    let e_dim = spec.time_embed_dim;
    let mut time_feats = Vec::with_capacity(spec.n_times);
    let (embed_grad, embed) = if spec.has_embedding() {
        let mut c = Array2::<f64>::zeros((batch, e_dim));
        let freqs = fourier_frequencies(e_dim)?;
        let mut buf = vec![0.0; e_dim];
        for (times, proj) in input.times.iter().zip(&layout.time_proj) {
            let mut feats = Array2::<f64>::zeros((batch, e_dim));
            if times.len() == 1 {
                fourier_into(times[0], e_dim, &mut buf)?;
                for mut row in feats.rows_mut() {
                    row.assign(&ArrayView1::from(&buf[..]));
                }
            } else {
                for (i, &t) in times.iter().enumerate() {
                    fourier_into(t, e_dim, &mut buf)?;
                    feats.row_mut(i).assign(&ArrayView1::from(&buf[..]));
                }
            }
            debug_assert_eq!(freqs.len() * 2, e_dim);
            c += &feats.dot(&params.mat(*proj));
            time_feats.push(feats);
        }
        if let Some(b) = layout.embed_bias {
            c += &params.row(b);
        }
        if let (Some(table), Some(labels)) = (layout.class_table, labels.as_ref()) {
            let table = params.mat(table);
            for (mut row, &lab) in c.rows_mut().into_iter().zip(labels) {
                row += &table.row(lab);
            }
        }
        let (e, de) = activate(act, &c);
        (Some(de), Some(e))
    } else {
        (None, None)
    };

    let n_hidden = spec.hidden_dims.len();
    let mut layer_inputs = Vec::with_capacity(n_hidden);
    let mut pre_film = Vec::with_capacity(n_hidden);
    let mut film = Vec::with_capacity(n_hidden);
    let mut act_grad = Vec::with_capacity(n_hidden);
    let mut masks = Vec::with_capacity(n_hidden);
    let mut hidden_out: Vec<Array2<f64>> = Vec::with_capacity(n_hidden);
    let mut dropout = dropout.filter(|(p, _)| *p > 0.0);

    let assemble = |l: usize, prev: ArrayView2<'_, f64>| -> Array2<f64> {
        let mut parts: Vec<ArrayView2<'_, f64>> = vec![prev];
        if l == 0 && spec.embed_concat() {
            parts.push(embed.as_ref().expect("embedding present").view());
        }
        if let Some(c) = input.cond.get(l) {
            parts.push(c.view());
        }
        if parts.len() == 1 {
            prev.to_owned()
        } else {
            concatenate(Axis(1), &parts).expect("row counts agree")
        }
    };

    for (l, slots) in layout.hidden.iter().enumerate() {
        let inp = if l == 0 {
            assemble(0, input.x)
        } else {
            assemble(l, hidden_out[l - 1].view())
        };
        let mut u = inp.dot(&params.mat(slots.w));
        u += &params.row(slots.b);
        let (a, fs) = match slots.film {
            Some([sw, sb, tw, tb]) => {
                let e = embed.as_ref().expect("film needs embedding");
                let mut scale = e.dot(&params.mat(sw));
                scale += &params.row(sb);
                let mut shift = e.dot(&params.mat(tw));
                shift += &params.row(tb);
                let mut a = &u * &scale.mapv(|v| 1.0 + v);
                a += &shift;
                (a, Some((scale, shift)))
            }
            None => (u.clone(), None),
        };
        let (mut h, da) = activate(act, &a);
        let mask = match dropout.as_mut() {
            Some((p, rng)) => {
                let keep = 1.0 - *p;
                let m = Array2::from_shape_fn(h.dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h *= &m;
                Some(m)
            }
            None => None,
        };
        layer_inputs.push(inp);
        pre_film.push(u);
        film.push(fs);
        act_grad.push(da);
        masks.push(mask);
        hidden_out.push(h);
    }

    let head_input = if n_hidden == 0 {
        assemble(0, input.x)
    } else {
        hidden_out[n_hidden - 1].clone()
    };
    let mut out = head_input.dot(&params.mat(layout.out_w));
    out += &params.row(layout.out_b);

    let tape = MlpTape {
        spec: spec.clone(),
        fingerprint: params.fingerprint(),
        time_feats,
        labels,
        embed_grad,
        embed,
        layer_inputs,
        pre_film,
        film,
        act_grad,
        masks,
        head_input,
        hidden_out,
    };
    Ok((out, tape))
}

/// Reverse pass for the scalar loss whose output gradient is `d_out`.
///
/// `d_hidden` optionally adds upstream gradients on hidden-layer outputs
/// (entry `l` for hidden layer `l`); this is how features taken from inner
/// layers are differentiated.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    tape: &MlpTape,
    d_out: ArrayView2<'_, f64>,
    d_hidden: &[Option<Array2<f64>>],
) -> Result<MlpGrads> {
    if &tape.spec != spec {
        return Err(Error::StaleTape("tape was recorded for a different spec".into()));
    }
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::StaleTape(
            "parameters changed since the forward pass".into(),
        ));
    }
    let batch = tape.batch();
    if d_out.dim() != (batch, spec.output_dim) {
        return Err(Error::shape(format!(
            "output gradient is {:?}, expected ({batch}, {})",
            d_out.dim(),
            spec.output_dim
        )));
    }
    let n_hidden = spec.hidden_dims.len();
    if !d_hidden.is_empty() && d_hidden.len() != n_hidden {
        return Err(Error::shape("hidden gradients must cover every hidden layer"));
    }

    let layout = spec.layout();
    let mut g = params.zeros_like();

    g.mat_mut(layout.out_w)
        .assign(&tape.head_input.t().dot(&d_out));
    g.mat_mut(layout.out_b)
        .row_mut(0)
        .assign(&d_out.sum_axis(Axis(0)));
    let mut d_inp = d_out.dot(&params.mat(layout.out_w).t());

    let mut d_embed = tape
        .embed
        .as_ref()
        .map(|e| Array2::<f64>::zeros(e.dim()));
    let mut d_cond: Vec<Array2<f64>> = spec
        .cond_dims
        .iter()
        .map(|&w| Array2::zeros((batch, w)))
        .collect();

    // Splits the gradient of a layer input into [prev | embed? | cond?].
    let mut split = |l: usize, d: Array2<f64>, d_embed: &mut Option<Array2<f64>>| -> Array2<f64> {
        let prev_w = if l == 0 {
            spec.input_dim
        } else {
            spec.hidden_dims[l - 1]
        };
        let mut col = prev_w;
        if l == 0 && spec.embed_concat() {
            let e = spec.time_embed_dim;
            if let Some(de) = d_embed.as_mut() {
                *de += &d.slice(s![.., col..col + e]);
            }
            col += e;
        }
        if let Some(w) = spec.cond_dims.get(l).copied() {
            d_cond[l] += &d.slice(s![.., col..col + w]);
        }
        d.slice(s![.., ..prev_w]).to_owned()
    };

    if n_hidden == 0 {
        d_inp = split(0, d_inp, &mut d_embed);
    } else {
        for l in (0..n_hidden).rev() {
            let slots = &layout.hidden[l];
            let mut dh = d_inp;
            if let Some(Some(extra)) = d_hidden.get(l) {
                if extra.dim() != dh.dim() {
                    return Err(Error::shape(format!(
                        "hidden gradient {l} is {:?}, expected {:?}",
                        extra.dim(),
                        dh.dim()
                    )));
                }
                dh += extra;
            }
            if let Some(m) = &tape.masks[l] {
                dh *= m;
            }
            let da = &tape.act_grad[l] * &dh;
            let du = match (&slots.film, &tape.film[l]) {
                (Some([sw, sb, tw, tb]), Some((scale, _shift))) => {
                    let e = tape.embed.as_ref().expect("film needs embedding");
                    let du = &da * &scale.mapv(|v| 1.0 + v);
                    let dscale = &da * &tape.pre_film[l];
                    g.mat_mut(*sw).assign(&e.t().dot(&dscale));
                    g.mat_mut(*sb).row_mut(0).assign(&dscale.sum_axis(Axis(0)));
                    g.mat_mut(*tw).assign(&e.t().dot(&da));
                    g.mat_mut(*tb).row_mut(0).assign(&da.sum_axis(Axis(0)));
                    if let Some(de) = d_embed.as_mut() {
                        *de += &dscale.dot(&params.mat(*sw).t());
                        *de += &da.dot(&params.mat(*tw).t());
                    }
                    du
                }
                _ => da,
            };
            g.mat_mut(slots.w)
                .assign(&tape.layer_inputs[l].t().dot(&du));
            g.mat_mut(slots.b)
                .row_mut(0)
                .assign(&du.sum_axis(Axis(0)));
            let d_layer_in = du.dot(&params.mat(slots.w).t());
            d_inp = split(l, d_layer_in, &mut d_embed);
        }
    }

    if let (Some(de), Some(grad)) = (d_embed, tape.embed_grad.as_ref()) {
        let dc = grad * &de;
        for (feats, proj) in tape.time_feats.iter().zip(&layout.time_proj) {
            g.mat_mut(*proj).assign(&feats.t().dot(&dc));
        }
        if let Some(b) = layout.embed_bias {
            g.mat_mut(b).row_mut(0).assign(&dc.sum_axis(Axis(0)));
        }
        if let (Some(table), Some(labels)) = (layout.class_table, tape.labels.as_ref()) {
            let mut gt = g.mat_mut(table);
            for (row, &lab) in dc.rows().into_iter().zip(labels) {
                let mut target = gt.row_mut(lab);
                target += &row;
            }
        }
    }

    Ok(MlpGrads {
        params: g,
        input: d_inp,
        cond: d_cond,
    })
}
