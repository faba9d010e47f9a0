//! Global-average-pool + linear classification head.

use crate::discrepancy::{HeadOutputs, Matrix, TaskKind};
use crate::nn::{self, ParamSet};
use crate::tensor::Tensor3;

use super::data::Target;
use super::{Alignment, TaskHead};

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    pub num_classes: usize,
    pub channels: usize,
    pub params: ParamSet,
}

impl ClsHead {
    pub fn new(channels: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = nn::rng(seed, 0x636c73);
        let mut params = ParamSet::default();
        params.push(
            "fc.weight",
            vec![num_classes, channels],
            nn::normal_init(&mut rng, num_classes * channels, (1.0 / channels as f64).sqrt()),
            true,
        );
        params.push("fc.bias", vec![num_classes], vec![0.0; num_classes], true);
        Self {
            num_classes,
            channels,
            params,
        }
    }

    pub fn logits(&self, feats: &[Tensor3]) -> Vec<f64> {
        let pooled = nn::global_avg_pool(&feats[0]);
        nn::linear(&pooled, self.params.get(0), self.params.get(1))
    }
}

impl TaskHead for ClsHead {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn align(&self, _clean: &[Tensor3]) -> Alignment {
        Alignment::default()
    }

    fn training_alignment(&self, _feats: &[Tensor3]) -> Alignment {
        Alignment::default()
    }

    fn outputs(&self, feats: &[Tensor3], _align: &Alignment) -> HeadOutputs {
        HeadOutputs {
            cls_logits: Some(Matrix::row_vector(self.logits(feats))),
            ..Default::default()
        }
    }

    fn backward(
        &self,
        feats: &[Tensor3],
        _align: &Alignment,
        grad: &HeadOutputs,
        param_grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<Tensor3> {
        let g = &grad.cls_logits.as_ref().expect("cls_logits gradient").data;
        let pooled = nn::global_avg_pool(&feats[0]);
        let mut scratch;
        let pg = match param_grads {
            Some(p) => p,
            None => {
                scratch = self.params.zero_grads();
                &mut scratch[..]
            }
        };
        let (lo, hi) = pg.split_at_mut(1);
        let g_pooled = nn::linear_backward(&pooled, self.params.get(0), g, &mut lo[0], &mut hi[0]);
        vec![nn::global_avg_pool_backward(feats[0].shape(), &g_pooled)]
    }

    fn supervised_loss(&self, out: &HeadOutputs, target: &Target, _align: &Alignment) -> (f64, HeadOutputs) {
        let Target::Class(k) = target else {
            panic!("classification head needs a class target")
        };
        let logits = &out.cls_logits.as_ref().expect("cls_logits").data;
        let (loss, g) = nn::cross_entropy(logits, *k);
        (
            loss,
            HeadOutputs {
                cls_logits: Some(Matrix::row_vector(g)),
                ..Default::default()
            },
        )
    }
}
