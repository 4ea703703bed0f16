//! Sparse linear maps applied independently to each contiguous block of a
//! tensor. All spatial builders assume one NHWC image per block.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use super::Real;

#[derive(Debug, Clone)]
struct Csr {
    ptr: Vec<u32>,
    idx: Vec<u32>,
    w: Vec<f64>,
    // Set when every row has at most one unit entry; `u32::MAX` marks an empty row.
    gather: Option<Vec<u32>>,
    unit: bool,
}

impl Csr {
    fn from_triplets(rows: usize, mut trip: Vec<(u32, u32, f64)>) -> Self {
        trip.sort_by_key(|&(r, c, _)| (r, c));
        let mut ptr = vec![0u32; rows + 1];
        for &(r, _, _) in &trip {
            ptr[r as usize + 1] += 1;
        }
        for r in 0..rows {
            ptr[r + 1] += ptr[r];
        }
        let idx: Vec<u32> = trip.iter().map(|t| t.1).collect();
        let w: Vec<f64> = trip.iter().map(|t| t.2).collect();
        let unit = w.iter().all(|&x| x == 1.0);
        let simple = unit && ptr.windows(2).all(|p| p[1] - p[0] <= 1);
        let gather = simple.then(|| ptr.windows(2).map(|p| if p[1] > p[0] { idx[p[0] as usize] } else { u32::MAX }).collect());
        Csr { ptr, idx, w, gather, unit }
    }

    fn apply_block<T: Real>(&self, input: &[T], out: &mut [T]) {
        if let Some(g) = &self.gather {
            for (o, &i) in out.iter_mut().zip(g) {
                *o = if i == u32::MAX { T::zero() } else { input[i as usize] };
            }
            return;
        }
        if self.unit {
            for (r, o) in out.iter_mut().enumerate() {
                let (s, e) = (self.ptr[r] as usize, self.ptr[r + 1] as usize);
                *o = self.idx[s..e].iter().fold(T::zero(), |a, &j| a + input[j as usize]);
            }
            return;
        }
        for (r, o) in out.iter_mut().enumerate() {
            let (s, e) = (self.ptr[r] as usize, self.ptr[r + 1] as usize);
            let mut acc = T::zero();
            for j in s..e {
                let w = self.w[j];
                let v = input[self.idx[j] as usize];
                acc = acc + if w == 1.0 { v } else { v * T::of(w) };
            }
            *o = acc;
        }
    }
}

/// `out_block = M * in_block` for every block, with `M` of size `out_len x in_len`.
#[derive(Debug, Clone)]
pub struct SparseMap {
    in_len: usize,
    out_len: usize,
    fwd: Csr,
    bwd: Csr,
}

impl SparseMap {
    /// Build from `(out_index, in_index, weight)` entries. Duplicates are summed
    /// implicitly by the CSR product.
    pub fn new(in_len: usize, out_len: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let fwd: Vec<_> = entries.iter().map(|&(o, i, w)| (o as u32, i as u32, w)).collect();
        let bwd: Vec<_> = entries.iter().map(|&(o, i, w)| (i as u32, o as u32, w)).collect();
        assert!(entries.iter().all(|&(o, i, _)| o < out_len && i < in_len), "sparse entry out of range");
        SparseMap { in_len, out_len, fwd: Csr::from_triplets(out_len, fwd), bwd: Csr::from_triplets(in_len, bwd) }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn apply<T: Real>(&self, input: &[T], transpose: bool) -> Vec<T> {
        let (csr, il, ol) = if transpose { (&self.bwd, self.out_len, self.in_len) } else { (&self.fwd, self.in_len, self.out_len) };
        let blocks = input.len() / il;
        let mut out = vec![T::zero(); blocks * ol];
        for b in 0..blocks {
            csr.apply_block(&input[b * il..(b + 1) * il], &mut out[b * ol..(b + 1) * ol]);
        }
        out
    }
}

/// Reflect an out-of-range index back into `0..n` (edge pixel not repeated).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// A dense 2-D filter kernel, `rows x cols`, centred.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

impl Kernel2d {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>) -> Self {
        assert_eq!(w.len(), rows * cols);
        assert!(rows % 2 == 1 && cols % 2 == 1, "kernel dims must be odd");
        Kernel2d { rows, cols, w }
    }

    pub fn outer(col: &[f64], row: &[f64]) -> Self {
        let w = col.iter().flat_map(|&a| row.iter().map(move |&b| a * b)).collect();
        Self::new(col.len(), row.len(), w)
    }

    fn key(&self) -> (usize, usize, Vec<u64>) {
        (self.rows, self.cols, self.w.iter().map(|v| v.to_bits()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum MapKey {
    Im2col { h: usize, w: usize, c: usize, k: usize },
    Upsample { h: usize, w: usize, c: usize },
    AvgPool { h: usize, w: usize, c: usize },
    GlobalAvg { h: usize, w: usize, c: usize },
    FilterBank { h: usize, w: usize, c: usize, kernels: Vec<(usize, usize, Vec<u64>)> },
    Embed { total: usize, offset: usize, part: usize },
}

static CACHE: LazyLock<Mutex<HashMap<MapKey, Arc<SparseMap>>>> = LazyLock::new(|| Mutex::new(HashMap::new()));

fn cached(key: MapKey, build: impl FnOnce() -> SparseMap) -> Arc<SparseMap> {
    if let Some(m) = CACHE.lock().expect("sparse map cache poisoned").get(&key) {
        return m.clone();
    }
    let map = Arc::new(build());
    CACHE.lock().expect("sparse map cache poisoned").entry(key).or_insert(map).clone()
}

/// `[H, W, C] -> [H*W, k*k*C]` patches with zero padding `k/2`; column index
/// is `(ky * k + kx) * C + c`.
pub fn im2col(h: usize, w: usize, c: usize, k: usize) -> Arc<SparseMap> {
    cached(MapKey::Im2col { h, w, c, k }, || {
        let p = (k / 2) as isize;
        let kk = k * k * c;
        let mut e = Vec::with_capacity(h * w * kk);
        for y in 0..h {
            for x in 0..w {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = x as isize + kx as isize - p;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let o = (y * w + x) * kk + (ky * k + kx) * c + ci;
                            let i = (sy as usize * w + sx as usize) * c + ci;
                            e.push((o, i, 1.0));
                        }
                    }
                }
            }
        }
        SparseMap::new(h * w * c, h * w * kk, e)
    })
}

/// Nearest-neighbour 2x upsampling `[H, W, C] -> [2H, 2W, C]`.
pub fn upsample2(h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached(MapKey::Upsample { h, w, c }, || {
        let mut e = Vec::with_capacity(4 * h * w * c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ci in 0..c {
                    e.push(((y * 2 * w + x) * c + ci, ((y / 2) * w + x / 2) * c + ci, 1.0));
                }
            }
        }
        SparseMap::new(h * w * c, 4 * h * w * c, e)
    })
}

/// 2x2 average pooling `[H, W, C] -> [H/2, W/2, C]`.
pub fn avgpool2(h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached(MapKey::AvgPool { h, w, c }, || {
        let (oh, ow) = (h / 2, w / 2);
        let mut e = Vec::with_capacity(4 * oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                for ci in 0..c {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        e.push(((y * ow + x) * c + ci, ((2 * y + dy) * w + 2 * x + dx) * c + ci, 0.25));
                    }
                }
            }
        }
        SparseMap::new(h * w * c, oh * ow * c, e)
    })
}

/// Spatial mean per channel `[H, W, C] -> [C]`.
pub fn global_avg(h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached(MapKey::GlobalAvg { h, w, c }, || {
        let s = 1.0 / (h * w) as f64;
        let e = (0..h * w).flat_map(|p| (0..c).map(move |ci| (ci, p * c + ci, s))).collect();
        SparseMap::new(h * w * c, c, e)
    })
}

/// Apply each kernel depthwise with reflection padding and stack the results
/// along channels: output channel `k * C + c` is kernel `k` on channel `c`.
pub fn filter_bank(h: usize, w: usize, c: usize, kernels: &[Kernel2d]) -> Arc<SparseMap> {
    let key = MapKey::FilterBank { h, w, c, kernels: kernels.iter().map(Kernel2d::key).collect() };
    cached(key, || {
        let oc = c * kernels.len();
        let mut e = Vec::new();
        for (ki, kern) in kernels.iter().enumerate() {
            let (pr, pc) = ((kern.rows / 2) as isize, (kern.cols / 2) as isize);
            for y in 0..h {
                for x in 0..w {
                    for ky in 0..kern.rows {
                        for kx in 0..kern.cols {
                            let wv = kern.w[ky * kern.cols + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let sy = reflect(y as isize + ky as isize - pr, h);
                            let sx = reflect(x as isize + kx as isize - pc, w);
                            for ci in 0..c {
                                e.push(((y * w + x) * oc + ki * c + ci, (sy * w + sx) * c + ci, wv));
                            }
                        }
                    }
                }
            }
        }
        SparseMap::new(h * w * c, h * w * oc, e)
    })
}

/// Place a length-`part` row at offset `offset` of a length-`total` row
/// (zeros elsewhere). Used for concatenation along the trailing axis.
pub fn embed_trailing(total: usize, offset: usize, part: usize) -> Arc<SparseMap> {
    cached(MapKey::Embed { total, offset, part }, || {
        let e = (0..part).map(|j| (offset + j, j, 1.0)).collect();
        SparseMap::new(part, total, e)
    })
}
