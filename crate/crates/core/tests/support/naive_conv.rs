//! Direct-loop reference convolution, written independently of the im2col
//! and depthwise paths in the library.

use rand::Rng;

pub struct Case {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c: &Case,
) -> (Vec<f64>, usize, usize) {
    let ho = (c.h + 2 * c.pad - c.k) / c.stride + 1;
    let wo = (c.w + 2 * c.pad - c.k) / c.stride + 1;
    let cin_g = c.cin / c.groups;
    let cout_g = c.cout / c.groups;
    let mut out = vec![0.0; c.n * c.cout * ho * wo];
    for b in 0..c.n {
        for oc in 0..c.cout {
            let g = oc / cout_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ki in 0..c.k {
                            for kj in 0..c.k {
                                let ih = (oh * c.stride + ki) as isize - c.pad as isize;
                                let iw = (ow * c.stride + kj) as isize - c.pad as isize;
                                if ih < 0 || iw < 0 || ih >= c.h as isize || iw >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((b * c.cin + ic) * c.h + ih as usize) * c.w + iw as usize];
                                let wv = weight[((oc * cin_g + icg) * c.k + ki) * c.k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c.cout + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// A random valid configuration mixing dense, grouped and depthwise cases.
pub fn random_case<R: Rng>(rng: &mut R) -> Case {
    loop {
        let kind = rng.gen_range(0..3);
        let groups = match kind {
            0 => 1,
            _ => rng.gen_range(1..=4),
        };
        let cin = groups * rng.gen_range(1..=3);
        let cout = if kind == 2 { cin } else { groups * rng.gen_range(1..=3) };
        let groups = if kind == 2 { cin } else { groups };
        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        let case = Case {
            n: rng.gen_range(1..=2),
            cin,
            cout,
            h: rng.gen_range(1..=9),
            w: rng.gen_range(1..=9),
            k,
            stride: rng.gen_range(1..=3),
            pad: rng.gen_range(0..=2),
            groups,
        };
        if case.h + 2 * case.pad >= k && case.w + 2 * case.pad >= k {
            return case;
        }
    }
}
