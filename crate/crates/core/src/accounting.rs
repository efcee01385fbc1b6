//! Closed-form parameter and multiply-accumulate counts.
//!
//! Only trainable scalars are counted (BN running statistics are buffers).
//! FLOPs are reported as conv + fully-connected multiply-accumulates, the
//! usual convention for ResNet tables; BN, ReLU, pooling and additions are
//! ignored.

use crate::ddnn::{Family, NetConfig, Stem};
use crate::layers::{BlockOrder, StrideAt};

fn conv_params(cin: usize, cout: usize, k: usize) -> u64 {
    (cin * cout * k * k) as u64
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Walks the layers of `cfg`, reporting each weighted layer as
/// (parameters, MACs) and each BN as its channel count.
fn walk(cfg: &NetConfig, mut on_layer: impl FnMut(u64, u64), mut on_bn: impl FnMut(usize)) {
    let [cin, mut h, mut w] = cfg.input_shape;
    let post = cfg.block_order == BlockOrder::PostActivation;
    let mut conv = |cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h: &mut usize, w: &mut usize| {
        *h = conv_out(*h, k, stride, pad);
        *w = conv_out(*w, k, stride, pad);
        let p = conv_params(cin, cout, k);
        on_layer(p, p * (*h * *w) as u64);
    };

    let mut ch = cin;
    if cfg.family != Family::Vgg {
        let c0 = cfg.stem_channels();
        match cfg.stem {
            Stem::Small => conv(cin, c0, 3, 1, 1, &mut h, &mut w),
            Stem::Large => {
                conv(cin, c0, 7, 2, 3, &mut h, &mut w);
                h = conv_out(h, 3, 2, 1);
                w = conv_out(w, 3, 2, 1);
            }
        }
        if post {
            on_bn(c0);
        }
        ch = c0;
    }

    let last = cfg.num_stages() - 1;
    for (i, &blocks) in cfg.stage_blocks.iter().enumerate() {
        let width = cfg.stage_channels[i];
        let out = cfg.stage_out_channels(i);
        for j in 0..blocks {
            let stride = if i > 0 && j == 0 && cfg.family != Family::Vgg {
                2
            } else {
                1
            };
            match cfg.family {
                Family::Vgg => {
                    conv(ch, width, 3, 1, 1, &mut h, &mut w);
                    on_bn(width);
                }
                Family::ResnetBasic => {
                    let (mut h2, mut w2) = (h, w);
                    if stride != 1 || ch != out {
                        conv(ch, out, 1, stride, 0, &mut h2, &mut w2);
                        if post {
                            on_bn(out);
                        }
                    }
                    // pre-activation blocks normalise their input, post-activation their outputs
                    on_bn(if post { width } else { ch });
                    conv(ch, width, 3, stride, 1, &mut h, &mut w);
                    on_bn(width);
                    conv(width, out, 3, 1, 1, &mut h, &mut w);
                }
                Family::ResnetBottleneck => {
                    let (mut h2, mut w2) = (h, w);
                    if stride != 1 || ch != out {
                        conv(ch, out, 1, stride, 0, &mut h2, &mut w2);
                        if post {
                            on_bn(out);
                        }
                    }
                    let (s1, s3) = match cfg.stride_at {
                        StrideAt::Conv1x1 => (stride, 1),
                        StrideAt::Conv3x3 => (1, stride),
                    };
                    on_bn(if post { width } else { ch });
                    conv(ch, width, 1, s1, 0, &mut h, &mut w);
                    on_bn(width);
                    conv(width, width, 3, s3, 1, &mut h, &mut w);
                    on_bn(if post { out } else { width });
                    conv(width, out, 1, 1, 0, &mut h, &mut w);
                }
            }
            ch = out;
        }
        if cfg.family == Family::Vgg && i < last {
            h /= 2;
            w /= 2;
        }
    }
    if !post && cfg.family != Family::Vgg {
        on_bn(ch);
    }
    let fc = (ch * cfg.num_classes) as u64;
    on_layer(fc + cfg.num_classes as u64, fc);
}

/// Trainable parameters of a standalone net with this architecture.
pub fn count_params(cfg: &NetConfig) -> u64 {
    let mut total = 0u64;
    let mut bn = 0u64;
    walk(cfg, |p, _| total += p, |c| bn += 2 * c as u64);
    total + bn
}

/// Multiply-accumulates of one forward pass on a single image.
pub fn count_flops(cfg: &NetConfig) -> u64 {
    let mut total = 0u64;
    walk(cfg, |_, m| total += m, |_| {});
    total
}
