//! Residual feature extractor with a five-level feature pyramid, and the
//! receptive-field calculator.
//!
//! Each residual block halves the resolution with a strided 3x3 convolution,
//! follows it with `convs_per_block - 1` unstrided 3x3 convolutions and adds a
//! 1x1 strided projection of the block input before the final ReLU. There is
//! no stem and no normalisation layer. The pyramid takes the outputs of
//! blocks 3, 4 and 5 (strides 8, 16, 32) through 1x1 laterals, merges them
//! top-down with nearest-neighbour upsampling and smooths each merged map with
//! a 3x3 convolution. Levels 6 and 7 are strided 3x3 convolutions on block 5.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Strides of the pyramid levels P3..P7 relative to the input image.
pub const PYRAMID_STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

/// Inputs must be a multiple of this on both axes.
pub const INPUT_MULTIPLE: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub block_channels: [usize; 5],
    pub convs_per_block: usize,
    pub fpn_channels: usize,
    pub desk_scale: bool,
    /// Explicit layer list for receptive-field reporting; when absent the
    /// list is derived from the architecture.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rf_layers: Option<Vec<LayerGeom>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn full_scale() -> Self {
        BackboneConfig {
            block_channels: [64, 64, 128, 256, 512],
            convs_per_block: 2,
            fpn_channels: 256,
            desk_scale: false,
            rf_layers: None,
        }
    }

    pub fn desk() -> Self {
        BackboneConfig {
            block_channels: [8, 16, 24, 32, 48],
            convs_per_block: 2,
            fpn_channels: 32,
            desk_scale: true,
            rf_layers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs_per_block == 0 {
            bail!(InvalidArgument, "convs_per_block must be at least 1");
        }
        if self.block_channels.contains(&0) || self.fpn_channels == 0 {
            bail!(InvalidArgument, "channel counts must be positive");
        }
        Ok(())
    }

    /// Layers along the deepest path into the detection outputs: the residual
    /// blocks, the two extra pyramid convolutions, then `head_convs` 3x3
    /// convolutions of the box heads plus their output convolution.
    pub fn derived_layers(&self, head_convs: usize) -> Vec<LayerGeom> {
        let mut v = Vec::new();
        for b in 0..5 {
            v.push(LayerGeom::new(format!("block{}.conv1", b + 1), 3, 2));
            for c in 1..self.convs_per_block {
                v.push(LayerGeom::new(
                    format!("block{}.conv{}", b + 1, c + 1),
                    3,
                    1,
                ));
            }
        }
        v.push(LayerGeom::new("fpn.p6", 3, 2));
        v.push(LayerGeom::new("fpn.p7", 3, 2));
        for h in 0..head_convs {
            v.push(LayerGeom::new(format!("head.conv{}", h + 1), 3, 1));
        }
        v.push(LayerGeom::new("head.out", 3, 1));
        v
    }

    /// The layer list used for receptive-field reporting.
    pub fn rf_layer_list(&self, head_convs: usize) -> Vec<LayerGeom> {
        self.rf_layers
            .clone()
            .unwrap_or_else(|| self.derived_layers(head_convs))
    }
}

/// Kernel size and stride of one layer. `r` and `j` are filled in by
/// [`receptive_field_trace`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    #[serde(default)]
    pub name: alloc::string::String,
    pub k: i64,
    pub s: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<i64>,
}

impl LayerGeom {
    pub fn new(name: impl Into<alloc::string::String>, k: i64, s: i64) -> Self {
        LayerGeom {
            name: name.into(),
            k,
            s,
            r: None,
            j: None,
        }
    }
}

/// Receptive field size and jump after the last layer, starting from a
/// single input pixel (`r = 1`, `j = 1`):
/// `r_out = r_in + (k - 1) * j_in`, `j_out = j_in * s`.
pub fn receptive_field(layers: &[LayerGeom]) -> Result<(i64, i64)> {
    let trace = receptive_field_trace(layers)?;
    Ok(trace
        .last()
        .map_or((1, 1), |l| (l.r.unwrap(), l.j.unwrap())))
}

/// Same recurrence as [`receptive_field`], returning every intermediate value.
pub fn receptive_field_trace(layers: &[LayerGeom]) -> Result<Vec<LayerGeom>> {
    let (mut r, mut j) = (1i64, 1i64);
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        if l.k <= 0 || l.s <= 0 {
            bail!(
                InvalidArgument,
                "layer {i} ({}) has non-positive kernel or stride (k={}, s={})",
                l.name,
                l.k,
                l.s
            );
        }
        r += (l.k - 1) * j;
        j *= l.s;
        let mut l = l.clone();
        l.r = Some(r);
        l.j = Some(j);
        out.push(l);
    }
    Ok(out)
}

/// Pyramid maps P3..P7, each `[1, fpn_channels, ceil(H/s), ceil(W/s)]`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; 5],
}

impl PyramidFeatures {
    /// Finest level (stride 8), the map used for region pooling.
    pub fn p3(&self) -> Var {
        self.levels[0]
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
}

impl ConvParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_he(
            &format!("{name}.weight"),
            [cout, cin, k, k],
            cin * k * k,
            rng,
        )?;
        let b = store.add_const(&format!("{name}.bias"), [cout], 0.0)?;
        Ok(ConvParams { w, b, k, stride })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), Conv2dSpec::same(self.k, self.stride))
    }
}

/// Convolution parameters used by the heads as well.
#[derive(Clone, Debug)]
pub struct Conv(ConvParams);

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Conv(ConvParams::new(
            store, name, cin, cout, k, stride, rng,
        )?))
    }

    pub fn bias_id(&self) -> ParamId {
        self.0.b
    }

    pub fn weight_id(&self) -> ParamId {
        self.0.w
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.0.apply(g, store, x)
    }
}

/// Stride-2 residual block: `convs` 3x3 convolutions with ReLU between them,
/// plus a 1x1 strided shortcut, followed by ReLU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    convs: Vec<ConvParams>,
    shortcut: ConvParams,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        convs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut v = Vec::new();
        for c in 0..convs.max(1) {
            let (ci, s) = if c == 0 { (cin, 2) } else { (cout, 1) };
            v.push(ConvParams::new(
                store,
                &format!("{name}.conv{}", c + 1),
                ci,
                cout,
                3,
                s,
                rng,
            )?);
        }
        let shortcut = ConvParams::new(store, &format!("{name}.shortcut"), cin, cout, 1, 2, rng)?;
        Ok(ResBlock { convs: v, shortcut })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.apply(g, store, h)?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        let sc = self.shortcut.apply(g, store, x)?;
        let sum = g.add(h, sc)?;
        Ok(g.relu(sum))
    }
}

/// Parameters of the residual extractor and its pyramid.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<ResBlock>,
    laterals: [ConvParams; 3],
    smooth: [ConvParams; 3],
    p6: ConvParams,
    p7: ConvParams,
}

impl Backbone {
    pub fn new<T: Scalar>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (b, &cout) in cfg.block_channels.iter().enumerate() {
            blocks.push(ResBlock::new(
                store,
                &format!("backbone.block{}", b + 1),
                cin,
                cout,
                cfg.convs_per_block,
                rng,
            )?);
            cin = cout;
        }
        let f = cfg.fpn_channels;
        let ch = cfg.block_channels;
        let laterals = [
            ConvParams::new(store, "fpn.lateral3", ch[2], f, 1, 1, rng)?,
            ConvParams::new(store, "fpn.lateral4", ch[3], f, 1, 1, rng)?,
            ConvParams::new(store, "fpn.lateral5", ch[4], f, 1, 1, rng)?,
        ];
        let smooth = [
            ConvParams::new(store, "fpn.smooth3", f, f, 3, 1, rng)?,
            ConvParams::new(store, "fpn.smooth4", f, f, 3, 1, rng)?,
            ConvParams::new(store, "fpn.smooth5", f, f, 3, 1, rng)?,
        ];
        let p6 = ConvParams::new(store, "fpn.p6", ch[4], f, 3, 2, rng)?;
        let p7 = ConvParams::new(store, "fpn.p7", f, f, 3, 2, rng)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            blocks,
            laterals,
            smooth,
            p6,
            p7,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Run the extractor on a `[1, 1, H, W]` image with `H` and `W` multiples of 128.
    pub fn extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<PyramidFeatures> {
        let dims = g.shape(image).to_vec();
        if dims.len() != 4 || dims[1] != 1 {
            bail!(
                Shape,
                "backbone expects a [N,1,H,W] image, got {}",
                g.value(image).shape()
            );
        }
        if !dims[2].is_multiple_of(INPUT_MULTIPLE)
            || !dims[3].is_multiple_of(INPUT_MULTIPLE)
            || dims[2] == 0
            || dims[3] == 0
        {
            bail!(
                InvalidArgument,
                "input {}x{} is not a multiple of {INPUT_MULTIPLE}; pad the page first",
                dims[2],
                dims[3]
            );
        }
        let mut x = image;
        let mut c = Vec::with_capacity(5);
        for blk in &self.blocks {
            x = blk.apply(g, store, x)?;
            c.push(x);
        }
        let l5 = self.laterals[2].apply(g, store, c[4])?;
        let l4 = self.laterals[1].apply(g, store, c[3])?;
        let l3 = self.laterals[0].apply(g, store, c[2])?;
        let up5 = g.upsample_nearest2x(l5)?;
        let m4 = g.add(l4, up5)?;
        let up4 = g.upsample_nearest2x(m4)?;
        let m3 = g.add(l3, up4)?;
        let p3 = self.smooth[0].apply(g, store, m3)?;
        let p4 = self.smooth[1].apply(g, store, m4)?;
        let p5 = self.smooth[2].apply(g, store, l5)?;
        let p6 = self.p6.apply(g, store, c[4])?;
        let p6r = g.relu(p6);
        let p7 = self.p7.apply(g, store, p6r)?;
        Ok(PyramidFeatures {
            levels: [p3, p4, p5, p6, p7],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geoms(v: &[(i64, i64)]) -> Vec<LayerGeom> {
        v.iter().map(|&(k, s)| LayerGeom::new("", k, s)).collect()
    }

    #[test]
    fn single_conv_rf() {
        assert_eq!(receptive_field(&geoms(&[(3, 1)])).unwrap(), (3, 1));
    }

    #[test]
    fn strided_then_plain_rf() {
        assert_eq!(receptive_field(&geoms(&[(3, 2), (3, 1)])).unwrap(), (7, 2));
    }

    #[test]
    fn rf_rejects_bad_layers() {
        assert!(receptive_field(&geoms(&[(0, 1)])).is_err());
        assert!(receptive_field(&geoms(&[(3, -1)])).is_err());
    }

    #[test]
    fn full_scale_derived_list() {
        let cfg = BackboneConfig::full_scale();
        // block path only: 5 blocks of [3x3/2, 3x3/1]
        let blocks: Vec<_> = cfg.derived_layers(4).into_iter().take(10).collect();
        assert_eq!(receptive_field(&blocks).unwrap(), (187, 32));
    }

    fn pyramid_dims(h: usize, w: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros([1, 1, h, w]));
        let p = bb.extract(&mut g, &store, img).unwrap();
        p.levels.iter().map(|&v| g.shape(v).to_vec()).collect()
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let d = pyramid_dims(256, 256);
        assert_eq!(d[0], [1, 32, 32, 32]);
        assert_eq!(d[4], [1, 32, 2, 2]);
        let d2 = pyramid_dims(512, 512);
        for (a, b) in d.iter().zip(&d2) {
            assert_eq!(a[2] * 2, b[2]);
            assert_eq!(a[3] * 2, b[3]);
        }
    }

    #[test]
    fn non_divisible_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&BackboneConfig::desk(), &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros([1, 1, 256, 320]));
        assert!(bb.extract(&mut g, &store, img).is_err());
    }
}
