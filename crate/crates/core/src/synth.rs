//! Seeded synthetic networks: random DAGs mixing every layer kind, and a
//! small cell-based architecture family.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{LayerKind, LayerSpec, NetworkGraph, PoolKind};

/// Layer widths of random networks, both aligned and unaligned to common
/// array dimensions.
pub const WIDTHS: [u32; 19] = [
    16, 24, 32, 40, 48, 56, 64, 72, 80, 96, 100, 112, 128, 144, 160, 192, 200, 240, 256,
];

/// Networks in [`nas_family`].
pub const NAS_FAMILY_SIZE: usize = 34;

#[derive(Debug, Clone)]
struct Tensor {
    name: String,
    h: u32,
    w: u32,
    c: u32,
}

#[derive(Debug, Default)]
struct Builder {
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
}

impl Builder {
    fn name(&self, stem: &str) -> String {
        format!("{stem}_{}", self.layers.len())
    }

    fn add(&mut self, layer: LayerSpec, inputs: &[&Tensor]) -> Tensor {
        for t in inputs {
            self.edges.push((t.name.clone(), layer.name.clone()));
        }
        let (h, w, c) = layer.output_shape();
        let out = Tensor {
            name: layer.name.clone(),
            h,
            w,
            c,
        };
        self.layers.push(layer);
        out
    }

    fn input(&mut self, h: u32, w: u32, c: u32) -> Tensor {
        self.add(LayerSpec::input("input", h, w, c), &[])
    }

    fn unary(&mut self, kind: LayerKind, x: &Tensor, stem: &str) -> Tensor {
        let l = LayerSpec::elementwise(&self.name(stem), kind, x.h, x.w, x.c);
        self.add(l, &[x])
    }

    fn conv(&mut self, x: &Tensor, f: u32, k: u32, stride: u32) -> Tensor {
        let l = LayerSpec::conv2d(&self.name("conv"), x.h, x.w, x.c, f, k, stride);
        self.add(l, &[x])
    }

    fn conv_bn(&mut self, x: &Tensor, f: u32, k: u32, stride: u32) -> Tensor {
        let y = self.conv(x, f, k, stride);
        self.unary(LayerKind::BatchNorm, &y, "bn")
    }

    fn conv_bn_relu(&mut self, x: &Tensor, f: u32, k: u32, stride: u32) -> Tensor {
        let y = self.conv_bn(x, f, k, stride);
        self.unary(LayerKind::Activation, &y, "relu")
    }

    fn separable(&mut self, x: &Tensor, f: u32, stride: u32) -> Tensor {
        let l = LayerSpec::depthwise(&self.name("dw"), x.h, x.w, x.c, 3, stride);
        let y = self.add(l, &[x]);
        let y = self.unary(LayerKind::BatchNorm, &y, "bn");
        let y = self.unary(LayerKind::Activation, &y, "relu");
        self.conv_bn_relu(&y, f, 1, 1)
    }

    fn pool(&mut self, x: &Tensor, kind: PoolKind, size: u32, stride: u32) -> Tensor {
        let l = LayerSpec::pool(&self.name("pool"), kind, x.h, x.w, x.c, size, stride);
        self.add(l, &[x])
    }

    fn residual(&mut self, x: &Tensor) -> Tensor {
        let y = self.conv_bn_relu(x, x.c, 3, 1);
        let y = self.conv_bn(&y, x.c, 3, 1);
        let l = LayerSpec::elementwise(&self.name("add"), LayerKind::ElemwiseAdd, x.h, x.w, x.c);
        let y = self.add(l, &[x, &y]);
        self.unary(LayerKind::Activation, &y, "relu")
    }

    fn inception(&mut self, x: &Tensor, f1: u32, f3: u32, pool_branch: Option<u32>) -> Tensor {
        let mut branches = vec![self.conv_bn_relu(x, f1, 1, 1), self.conv_bn_relu(x, f3, 3, 1)];
        if let Some(fp) = pool_branch {
            let p = self.pool(x, PoolKind::Max, 3, 1);
            branches.push(self.conv_bn_relu(&p, fp, 1, 1));
        }
        let total = branches.iter().map(|b| b.c).sum();
        let l = LayerSpec::elementwise(&self.name("concat"), LayerKind::Concat, x.h, x.w, total);
        let refs: Vec<&Tensor> = branches.iter().collect();
        self.add(l, &refs)
    }

    fn head(&mut self, x: &Tensor, classes: u32) -> Tensor {
        let l = LayerSpec::global_avg_pool(&self.name("gap"), x.h, x.w, x.c);
        let g = self.add(l, &[x]);
        let l = LayerSpec::fully_connected(&self.name("fc"), g.c, classes);
        let y = self.add(l, &[&g]);
        self.unary(LayerKind::Activation, &y, "softmax")
    }

    fn finish(self) -> NetworkGraph {
        NetworkGraph::new(self.layers, self.edges).expect("synthetic graphs are well formed")
    }
}

fn pick<R: Rng>(rng: &mut R, values: &[u32]) -> u32 {
    *values.choose(rng).expect("non-empty menu")
}

/// A random feed-forward DAG with plain, pooled, residual, inception,
/// separable and downsampling blocks.
pub fn random_network(seed: u64) -> NetworkGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::default();
    let hw = pick(&mut rng, &[32, 56, 64, 96]);
    let x = b.input(hw, hw, 3);
    let mut x = b.conv_bn_relu(&x, pick(&mut rng, &[16, 24, 32, 48, 64]), 3, 2);
    if rng.random_bool(0.5) {
        x = b.pool(&x, PoolKind::Max, 2, 2);
    }
    let blocks = rng.random_range(3..=6);
    for _ in 0..blocks {
        let f = pick(&mut rng, &WIDTHS);
        let can_shrink = x.h >= 4;
        x = match rng.random_range(0..6) {
            0 => b.conv_bn_relu(&x, f, pick(&mut rng, &[1, 3]), 1),
            1 if can_shrink => {
                let y = b.conv_bn_relu(&x, f, pick(&mut rng, &[1, 3]), 1);
                let kind = if rng.random_bool(0.5) { PoolKind::Max } else { PoolKind::Avg };
                b.pool(&y, kind, pick(&mut rng, &[2, 3]), 2)
            }
            2 => b.residual(&x),
            3 => {
                let pool_branch = rng.random_bool(0.5).then(|| pick(&mut rng, &WIDTHS[..8]));
                b.inception(&x, pick(&mut rng, &WIDTHS[..10]), f, pool_branch)
            }
            4 => b.separable(&x, f, if can_shrink { pick(&mut rng, &[1, 2]) } else { 1 }),
            _ if can_shrink => b.conv_bn_relu(&x, f, 3, 2),
            _ => b.conv_bn_relu(&x, f, 1, 1),
        };
    }
    b.head(&x, pick(&mut rng, &[10, 100, 1000]));
    b.finish()
}

/// `n` random networks with consecutive seeds.
pub fn random_networks(n: usize, seed: u64) -> Vec<NetworkGraph> {
    (0..n as u64).map(|i| random_network(seed.wrapping_add(i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellOp {
    Conv3,
    Conv1,
    Separable,
    Residual,
    Pool,
}

const CELL_OPS: [CellOp; 5] = [CellOp::Conv3, CellOp::Conv1, CellOp::Separable, CellOp::Residual, CellOp::Pool];

/// Member `index` of the architecture family: a fixed three-stage skeleton
/// whose width, depth and per-cell operations vary.
pub fn nas_network(index: usize) -> NetworkGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5A5_0000 + index as u64);
    let mut b = Builder::default();
    let x = b.input(32, 32, 3);
    let mut width = pick(&mut rng, &[16, 24, 32, 48, 64]);
    let mut x = b.conv_bn_relu(&x, width, 3, 1);
    let cells = rng.random_range(1..=3);
    for stage in 0..3 {
        if stage > 0 {
            width *= 2;
            x = b.conv_bn_relu(&x, width, 3, 2);
        }
        for _ in 0..cells {
            x = match *CELL_OPS.choose(&mut rng).expect("non-empty") {
                CellOp::Conv3 => b.conv_bn_relu(&x, width, 3, 1),
                CellOp::Conv1 => b.conv_bn_relu(&x, width, 1, 1),
                CellOp::Separable => b.separable(&x, width, 1),
                CellOp::Residual => b.residual(&x),
                CellOp::Pool => b.pool(&x, PoolKind::Max, 3, 1),
            };
        }
    }
    b.head(&x, 10);
    b.finish()
}

pub fn nas_family() -> Vec<NetworkGraph> {
    (0..NAS_FAMILY_SIZE).map(nas_network).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes_consistent(g: &NetworkGraph) -> bool {
        g.edges().iter().all(|(a, b)| {
            let (pa, pb) = (g.get(a).unwrap(), g.get(b).unwrap());
            let (h, w, c) = pa.output_shape();
            let spatial = h == pb.height && w == pb.width || pb.kind == LayerKind::FullyConnected;
            let channels = c == pb.channels || pb.kind == LayerKind::Concat;
            spatial && channels
        })
    }

    #[test]
    fn random_networks_are_deterministic_and_consistent() {
        let a = random_networks(20, 7);
        let b = random_networks(20, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_json(), y.to_json());
            assert!(shapes_consistent(x));
        }
        let kinds: std::collections::BTreeSet<LayerKind> =
            a.iter().flat_map(|g| g.layers().iter().map(|l| l.kind)).collect();
        assert!(kinds.len() >= 10, "{kinds:?}");
    }

    #[test]
    fn family_members_differ() {
        let fam = nas_family();
        assert_eq!(fam.len(), NAS_FAMILY_SIZE);
        let distinct: std::collections::BTreeSet<String> = fam.iter().map(|g| g.to_json()).collect();
        assert_eq!(distinct.len(), NAS_FAMILY_SIZE);
        assert!(fam.iter().all(shapes_consistent));
    }
}
