//! Small convolutional backbone shared by the toy tasks.
//!
//! Stage `i` is `conv3x3 → ReLU → 2x2 average pool`; selected stages emit a
//! feature level through a linear 1x1 lateral projection. The lateral has no
//! activation, so emitted features are dense and signed.

use serde::{Deserialize, Serialize};

use crate::nn::{self, ParamSet};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub width: usize,
    pub stages: usize,
    pub out_channels: usize,
    /// Stages from this index on emit a level.
    pub first_emitting_stage: usize,
}

impl BackboneSpec {
    pub fn emitted_levels(&self) -> usize {
        self.stages - self.first_emitting_stage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub params: ParamSet,
}

struct StageCache {
    input: Tensor3,
    pre: Tensor3,
    pooled: Tensor3,
}

pub struct BackboneCache {
    stages: Vec<StageCache>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Self {
        let mut rng = nn::rng(seed, 0x62626f6e65);
        let mut params = ParamSet::default();
        let mut cin = spec.in_channels;
        for s in 0..spec.stages {
            let w = spec.width;
            params.push(
                format!("stage{s}.conv.weight"),
                vec![w, cin, 3, 3],
                nn::normal_init(&mut rng, w * cin * 9, (2.0 / (9 * cin) as f64).sqrt()),
                true,
            );
            params.push(format!("stage{s}.conv.bias"), vec![w], vec![0.0; w], true);
            cin = w;
        }
        for l in 0..spec.emitted_levels() {
            let (w, c) = (spec.width, spec.out_channels);
            params.push(
                format!("lateral{l}.weight"),
                vec![c, w, 1, 1],
                nn::normal_init(&mut rng, c * w, (1.0 / w as f64).sqrt()),
                true,
            );
            params.push(format!("lateral{l}.bias"), vec![c], vec![0.0; c], true);
        }
        Self { spec, params }
    }

    fn conv_slot(&self, s: usize) -> usize {
        2 * s
    }

    fn lateral_slot(&self, l: usize) -> usize {
        2 * self.spec.stages + 2 * l
    }

    /// Emitted feature levels, finest first.
    pub fn forward(&self, image: &Tensor3) -> (Vec<Tensor3>, BackboneCache) {
        let spec = &self.spec;
        let mut stages = Vec::with_capacity(spec.stages);
        let mut levels = Vec::with_capacity(spec.emitted_levels());
        let mut x = image.clone();
        for s in 0..spec.stages {
            let k = self.conv_slot(s);
            let pre = nn::conv2d(&x, self.params.get(k), self.params.get(k + 1), spec.width, 3);
            let pooled = nn::avg_pool(&nn::relu(&pre), 2);
            if s >= spec.first_emitting_stage {
                let l = self.lateral_slot(s - spec.first_emitting_stage);
                levels.push(nn::conv2d(
                    &pooled,
                    self.params.get(l),
                    self.params.get(l + 1),
                    spec.out_channels,
                    1,
                ));
            }
            stages.push(StageCache {
                input: x,
                pre,
                pooled: pooled.clone(),
            });
            x = pooled;
        }
        (levels, BackboneCache { stages })
    }

    pub fn features(&self, image: &Tensor3) -> Vec<Tensor3> {
        self.forward(image).0
    }

    /// Accumulates parameter gradients into `grads` (if given) and returns the
    /// image gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        level_grads: &[Tensor3],
        mut grads: Option<&mut [Vec<f64>]>,
        need_input: bool,
    ) -> Option<Tensor3> {
        let spec = &self.spec;
        let mut scratch = self.params.zero_grads();
        let g: &mut [Vec<f64>] = match grads.as_deref_mut() {
            Some(g) => g,
            None => &mut scratch,
        };
        let mut carry: Option<Tensor3> = None;
        for s in (0..spec.stages).rev() {
            let st = &cache.stages[s];
            let mut g_pooled = carry.take().unwrap_or_else(|| Tensor3::zeros(st.pooled.shape()));
            if s >= spec.first_emitting_stage {
                let l = s - spec.first_emitting_stage;
                let slot = self.lateral_slot(l);
                let (gw, gb) = two(g, slot);
                let gl = nn::conv2d_backward(&st.pooled, self.params.get(slot), 1, &level_grads[l], gw, gb, true)
                    .expect("input grad requested");
                g_pooled.add_assign(&gl).expect("shape");
            }
            let g_relu = nn::avg_pool_backward(st.pre.shape(), 2, &g_pooled);
            let g_pre = nn::relu_backward(&st.pre, &g_relu);
            let slot = self.conv_slot(s);
            let want_input = s > 0 || need_input;
            let (gw, gb) = two(g, slot);
            carry = nn::conv2d_backward(&st.input, self.params.get(slot), 3, &g_pre, gw, gb, want_input);
        }
        carry
    }

    pub fn level_shapes(&self, image: Shape3) -> Vec<Shape3> {
        let mut out = Vec::new();
        let (mut h, mut w) = (image.height, image.width);
        for s in 0..self.spec.stages {
            h /= 2;
            w /= 2;
            if s >= self.spec.first_emitting_stage {
                out.push(Shape3::new(self.spec.out_channels, h, w));
            }
        }
        out
    }
}

fn two(g: &mut [Vec<f64>], slot: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = g.split_at_mut(slot + 1);
    (&mut lo[slot], &mut hi[0])
}
