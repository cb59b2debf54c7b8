//! Patch embedding (mini-PointNet) and positional embeddings.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point};
use crate::graph::Var;
use crate::nn::{fan_in_std, Ctx, Group, Initializer, Linear, LinearSpec, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Two pointwise MLP stages with a global-feature concat in between:
/// `3 → h1 → h2`, max-pool, `[pooled ‖ point] (2·h2) → 2·h2 → d`, max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniPointNet {
    pub first: [Linear; 2],
    pub second: [Linear; 2],
    pub dim: usize,
}

impl MiniPointNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        hidden: (usize, usize),
        dim: usize,
        group: Group,
    ) -> Self {
        let (h1, h2) = hidden;
        let mut lin = |suffix: &str, i: usize, o: usize, gain: f64| {
            Linear::new(
                store,
                init,
                LinearSpec {
                    name: &format!("{name}.{suffix}"),
                    in_dim: i,
                    out_dim: o,
                    bias: true,
                    group,
                    init: fan_in_std(i, gain),
                },
            )
        };
        let relu_gain = core::f64::consts::SQRT_2;
        let first = [
            lin("first.0", 3, h1, relu_gain),
            lin("first.1", h1, h2, 1.0),
        ];
        let second = [
            lin("second.0", 2 * h2, 2 * h2, relu_gain),
            lin("second.1", 2 * h2, dim, 1.0),
        ];
        Self { first, second, dim }
    }

    /// `points`: `(g·k)×3` centered neighbours, patch-major. Returns `g×d`.
    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, points: Var, k: usize) -> Result<Var> {
        let rows = ctx.value(points).rows();
        let h = self.first[0].forward(ctx, points)?;
        let h = ctx.g.relu(h)?;
        let f = self.first[1].forward(ctx, h)?;
        let pooled = ctx.g.max_groups(f, k)?;
        let spread: Vec<usize> = (0..rows).map(|i| i / k).collect();
        let global = ctx.g.gather_rows(pooled, &spread)?;
        let cat = ctx.g.concat_cols(&[global, f])?;
        let h = self.second[0].forward(ctx, cat)?;
        let h = ctx.g.relu(h)?;
        let o = self.second[1].forward(ctx, h)?;
        ctx.g.max_groups(o, k)
    }
}

/// Center-coordinate MLP `3 → hidden → d` with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct PosNet {
    pub layers: [Linear; 2],
}

impl PosNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        hidden: usize,
        dim: usize,
        group: Group,
    ) -> Self {
        let mut lin = |suffix: &str, i: usize, o: usize| {
            Linear::new(
                store,
                init,
                LinearSpec {
                    name: &format!("{name}.{suffix}"),
                    in_dim: i,
                    out_dim: o,
                    bias: true,
                    group,
                    init: fan_in_std(i, 1.0),
                },
            )
        };
        Self {
            layers: [lin("0", 3, hidden), lin("1", hidden, dim)],
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, centers: Var) -> Result<Var> {
        let h = self.layers[0].forward(ctx, centers)?;
        let h = ctx.g.gelu(h)?;
        self.layers[1].forward(ctx, h)
    }
}

pub fn points_tensor<F: Real>(points: &[Point]) -> Tensor<F> {
    Tensor::from_fn(&[points.len(), 3], |i| F::lit(points[i / 3][i % 3]))
}

/// Patch tokens (`g×d`) for a patch set, computed without gradients.
pub fn embed_patches<F: Real>(
    store: &ParamStore<F>,
    net: &MiniPointNet,
    patches: &PatchSet,
) -> Result<Tensor<F>> {
    if patches.group_size == 0 {
        return Err(Error::Contract("empty patches".into()));
    }
    let mut ctx = Ctx::new(store, false);
    let x = ctx.constant(points_tensor(&patches.offsets));
    let out = net.forward(&mut ctx, x, patches.group_size)?;
    Ok(ctx.g.value(out).clone())
}

/// Positional embeddings (`g×d`) of center coordinates, without gradients.
pub fn positional_embedding<F: Real>(
    store: &ParamStore<F>,
    net: &PosNet,
    centers: &[Point],
) -> Result<Tensor<F>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.constant(points_tensor(centers));
    let out = net.forward(&mut ctx, x)?;
    Ok(ctx.g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Role {
    Class,
    Patch,
    Prompt,
}

/// Encoder input for one cloud: class token, patch tokens, then prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub centers: Vec<Point>,
    pub roles: Vec<Role>,
}

impl<F: Real> TokenSequence<F> {
    pub fn new(tokens: Tensor<F>, centers: Vec<Point>, roles: Vec<Role>) -> Result<Self> {
        check_roles(&roles)?;
        if tokens.shape().len() != 2 || tokens.rows() != roles.len() || centers.len() != roles.len() {
            return Err(crate::error::shape_err(
                "token_sequence",
                tokens.shape(),
                &[roles.len(), centers.len()],
            ));
        }
        Ok(Self {
            tokens,
            centers,
            roles,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }
}

/// One class token at position 0; prompts only after every patch token.
pub fn check_roles(roles: &[Role]) -> Result<()> {
    if roles.first() != Some(&Role::Class) {
        return Err(Error::Contract("sequence must start with the class token".into()));
    }
    let mut seen_prompt = false;
    for r in &roles[1..] {
        match r {
            Role::Class => return Err(Error::Contract("more than one class token".into())),
            Role::Prompt => seen_prompt = true,
            Role::Patch if seen_prompt => {
                return Err(Error::Contract("patch token after a prompt token".into()))
            }
            Role::Patch => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_patches, PointCloud};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(store: &mut ParamStore<f64>, seed: u64) -> MiniPointNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        MiniPointNet::new(store, &mut init, "t", (8, 16), 12, Group::Tokenizer)
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn permutation_within_patch_is_invisible() {
        let mut store = ParamStore::new();
        let n = net(&mut store, 1);
        let patches = make_patches(&random_cloud(40, 2), 4, 6).unwrap();
        let base = embed_patches(&store, &n, &patches).unwrap();
        let mut shuffled = patches.clone();
        for p in 0..4 {
            shuffled.offsets[p * 6..(p + 1) * 6].reverse();
            shuffled.offsets[p * 6..(p + 1) * 6].rotate_left(p + 1);
        }
        let other = embed_patches(&store, &n, &shuffled).unwrap();
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patches_are_embedded_independently() {
        let mut store = ParamStore::new();
        let n = net(&mut store, 3);
        let patches = make_patches(&random_cloud(30, 4), 3, 5).unwrap();
        let base = embed_patches(&store, &n, &patches).unwrap();
        // duplicate patch 1 and swap the order: rows follow the patches
        let mut dup = patches.clone();
        let p1 = patches.patch(1).to_vec();
        let p0 = patches.patch(0).to_vec();
        dup.offsets[0..5].copy_from_slice(&p1);
        dup.offsets[5..10].copy_from_slice(&p0);
        dup.offsets[10..15].copy_from_slice(&p1);
        let out = embed_patches(&store, &n, &dup).unwrap();
        assert_eq!(out.row(0), base.row(1));
        assert_eq!(out.row(1), base.row(0));
        assert_eq!(out.row(2), base.row(1));
    }

    #[test]
    fn zero_patch_with_zero_final_layer_is_zero() {
        let mut store = ParamStore::new();
        let n = net(&mut store, 5);
        for id in n.second[1].params() {
            store.get_mut(id).value = Tensor::zeros(store.value(id).shape());
        }
        let cloud = PointCloud::new(alloc::vec![[0.0; 3]; 4]).unwrap();
        let patches = make_patches(&cloud, 1, 4).unwrap();
        let out = embed_patches(&store, &n, &patches).unwrap();
        assert_eq!(out.shape(), &[1, 12]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_embedding_contract() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut init = Initializer::new(&mut rng);
        let pos = PosNet::new(&mut store, &mut init, "pos", 16, 8, Group::Positional);
        let centers = [[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [-1.0, 0.0, 2.0]];
        let a = positional_embedding(&store, &pos, &centers).unwrap();
        assert_eq!(a.row(0), a.row(1));
        assert_ne!(a.row(0), a.row(2));
        assert_eq!(a, positional_embedding(&store, &pos, &centers).unwrap());

        let mut zero = ParamStore::<f64>::new();
        let mut init = Initializer::<ChaCha8Rng>::zeroed();
        let pos = PosNet::new(&mut zero, &mut init, "pos", 16, 8, Group::Positional);
        let z = positional_embedding(&zero, &pos, &centers).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn role_rules() {
        use Role::*;
        assert!(check_roles(&[Class, Patch, Patch, Prompt]).is_ok());
        assert!(check_roles(&[Patch, Class]).is_err());
        assert!(check_roles(&[Class, Prompt, Patch]).is_err());
        assert!(check_roles(&[Class, Patch, Class]).is_err());
        assert!(check_roles(&[]).is_err());
    }
}
