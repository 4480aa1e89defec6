//! Plain-array reference implementations used to cross-check the tensor
//! code. Everything here is written from the definitions, pixel by pixel,
//! in f64, without sharing code with the library.

#![allow(dead_code)]

/// `c x h x w` map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Self { c, h, w, v }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut v = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(ch, y, x));
                }
            }
        }
        Self { c, h, w, v }
    }

    pub fn channels(&self, start: usize, n: usize) -> Map {
        Map::from_fn(n, self.h, self.w, |c, y, x| self.at(start + c, y, x))
    }
}

/// Source coordinate for output index `i` with half-pixel centers, and the
/// two taps with the weight of the upper one.
fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let scale = src as f64 / dst as f64;
    let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(m: &Map, h: usize, w: usize) -> Map {
    Map::from_fn(m.c, h, w, |c, y, x| {
        let (y0, y1, fy) = taps(y, m.h, h);
        let (x0, x1, fx) = taps(x, m.w, w);
        let top = m.at(c, y0, x0) * (1.0 - fx) + m.at(c, y0, x1) * fx;
        let bot = m.at(c, y1, x0) * (1.0 - fx) + m.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Pointwise linear map: `weight` is `cout x cin` row-major.
pub fn conv1x1(m: &Map, weight: &[f64], bias: &[f64]) -> Map {
    let cout = bias.len();
    assert_eq!(weight.len(), cout * m.c);
    Map::from_fn(cout, m.h, m.w, |o, y, x| {
        bias[o] + (0..m.c).map(|i| weight[o * m.c + i] * m.at(i, y, x)).sum::<f64>()
    })
}

pub fn softmax(m: &Map) -> Map {
    Map::from_fn(m.c, m.h, m.w, |c, y, x| {
        let mx = (0..m.c).map(|k| m.at(k, y, x)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m.c).map(|k| (m.at(k, y, x) - mx).exp()).sum();
        (m.at(c, y, x) - mx).exp() / z
    })
}

pub fn concat(parts: &[&Map]) -> Map {
    let (h, w) = (parts[0].h, parts[0].w);
    let mut v = Vec::new();
    for p in parts {
        assert_eq!((p.h, p.w), (h, w));
        v.extend_from_slice(&p.v);
    }
    Map::new(v.len() / (h * w), h, w, v)
}

/// `a * cur + (1 - a) * other`, `other` resampled onto `cur`'s grid and a
/// one-channel gate applied to every channel.
pub fn mix(a: &Map, cur: &Map, other: &Map) -> Map {
    let o = resize(other, cur.h, cur.w);
    Map::from_fn(cur.c, cur.h, cur.w, |c, y, x| {
        let g = a.at(if a.c == 1 { 0 } else { c }, y, x);
        g * cur.at(c, y, x) + (1.0 - g) * o.at(c, y, x)
    })
}

pub fn log_floor(m: &Map) -> Map {
    Map::from_fn(m.c, m.h, m.w, |c, y, x| m.at(c, y, x).max(1e-30).ln())
}

/// One scale's inputs to fusion.
#[derive(Clone, Debug)]
pub struct Branch {
    pub scale: f64,
    pub f: Map,
    pub alpha: Option<Map>,
    pub beta: Option<Map>,
}

pub struct Heads {
    pub seg_w: Vec<f64>,
    pub seg_b: Vec<f64>,
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
}

fn seg(heads: &Heads, m: &Map) -> Map {
    conv1x1(m, &heads.seg_w, &heads.seg_b)
}

fn unit(branches: &[Branch]) -> &Branch {
    branches.iter().find(|b| b.scale == 1.0).expect("1x branch")
}

/// Reference output of every strategy for branches sorted coarse to fine.
pub fn fuse(strategy: &str, b: &[Branch], heads: &Heads, out: (usize, usize)) -> Map {
    let u = unit(b);
    let (gh, gw) = (u.f.h, u.f.w);
    let half = u.f.c / 2;
    let n = b.len();
    let on_grid = match strategy {
        "single" => seg(heads, &u.f),
        "avg" | "max" => {
            let probs: Vec<Map> = b.iter().map(|x| resize(&softmax(&seg(heads, &x.f)), gh, gw)).collect();
            let k = probs[0].c;
            let fused = if strategy == "avg" {
                Map::from_fn(k, gh, gw, |c, y, x| probs.iter().map(|p| p.at(c, y, x)).sum::<f64>() / n as f64)
            } else {
                let mx = Map::from_fn(k, gh, gw, |c, y, x| {
                    probs.iter().map(|p| p.at(c, y, x)).fold(f64::NEG_INFINITY, f64::max)
                });
                Map::from_fn(k, gh, gw, |c, y, x| mx.at(c, y, x) / (0..k).map(|j| mx.at(j, y, x)).sum::<f64>())
            };
            log_floor(&fused)
        }
        "msd-concat" => {
            let feats: Vec<Map> = b.iter().map(|x| resize(&x.f, gh, gw)).collect();
            let refs: Vec<&Map> = feats.iter().collect();
            seg(heads, &conv1x1(&concat(&refs), &heads.proj_w, &heads.proj_b))
        }
        "hmsa-score" => {
            // s_k = a_k * seg(f_k) + (1 - a_k) * up(s_{k-1}), coarse to fine
            let mut s = seg(heads, &b[0].f);
            for x in &b[1..] {
                s = mix(x.alpha.as_ref().unwrap(), &seg(heads, &x.f), &s);
            }
            resize(&s, gh, gw)
        }
        "fhmsa-feature" => {
            let mut f = b[0].f.clone();
            for x in &b[1..] {
                f = mix(x.alpha.as_ref().unwrap(), &x.f, &f);
            }
            seg(heads, &resize(&f, gh, gw))
        }
        "bimsa" => {
            if n == 1 {
                seg(heads, &u.f)
            } else {
                let mut down = b[n - 1].f.channels(0, half);
                for x in b[..n - 1].iter().rev() {
                    down = mix(x.alpha.as_ref().unwrap(), &x.f.channels(0, half), &down);
                }
                let mut up = b[0].f.channels(half, half);
                for x in &b[1..] {
                    up = mix(x.beta.as_ref().unwrap(), &x.f.channels(half, half), &up);
                }
                seg(heads, &concat(&[&resize(&down, gh, gw), &resize(&up, gh, gw)]))
            }
        }
        other => panic!("no reference for {other}"),
    };
    resize(&on_grid, out.0, out.1)
}

/// IoU per class by counting pixel sets directly; `None` when the class
/// occurs in neither map. Pixels with truth 255 are skipped.
pub fn iou_by_sets(pred: &[u8], truth: &[u8], n_class: usize) -> (Vec<Option<f64>>, f64) {
    let iou: Vec<Option<f64>> = (0..n_class as u8)
        .map(|c| {
            let scored = || pred.iter().zip(truth).filter(|(_, &t)| t != 255);
            let inter = scored().filter(|(&p, &t)| p == c && t == c).count();
            let union = scored().filter(|(&p, &t)| p == c || t == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (iou, miou)
}
