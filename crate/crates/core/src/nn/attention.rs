use super::Init;
use crate::autodiff::{concat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention split over `num_heads` heads, with query,
/// key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub head_dim: usize,
    pub query_dim: usize,
    pub source_dim: usize,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_output: ParamId,
}

/// Key/value projections of an attention source, computed once and reused
/// for every query.
#[derive(Clone, Debug)]
pub struct AttentionMemory<'t> {
    heads: Vec<(Var<'t>, Var<'t>)>,
    pub len: usize,
}

impl MultiHeadAttention {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        query_dim: usize,
        source_dim: usize,
        model_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("model dim {model_dim} is not divisible by {num_heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            num_heads,
            head_dim: model_dim / num_heads,
            query_dim,
            source_dim,
            w_query: init.glorot(&format!("{name}.w_query"), query_dim, model_dim),
            w_key: init.glorot(&format!("{name}.w_key"), source_dim, model_dim),
            w_value: init.glorot(&format!("{name}.w_value"), source_dim, model_dim),
            w_output: init.glorot(&format!("{name}.w_output"), model_dim, model_dim),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn memory<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        keys: Var<'t>,
        values: Var<'t>,
    ) -> Result<AttentionMemory<'t>> {
        let (ks, vs) = (keys.shape(), values.shape());
        if ks.len() != 2 || ks[0] == 0 {
            return Err(Error::invalid("attention", "empty attention source"));
        }
        if ks[0] != vs[0] {
            return Err(Error::shape("attention", &ks, &vs));
        }
        let k = keys.matmul(tape.param(store, self.w_key))?;
        let v = values.matmul(tape.param(store, self.w_value))?;
        let heads = (0..self.num_heads)
            .map(|h| {
                Ok((
                    k.slice(1, h * self.head_dim, self.head_dim)?,
                    v.slice(1, h * self.head_dim, self.head_dim)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionMemory { heads, len: ks[0] })
    }

    /// Context for a `1 x query_dim` query, plus each head's weights
    /// (`1 x S`).
    pub fn attend<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        memory: &AttentionMemory<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let q = query.matmul(tape.param(store, self.w_query))?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for (h, &(k, v)) in memory.heads.iter().enumerate() {
            let qh = q.slice(1, h * self.head_dim, self.head_dim)?;
            let w = qh.matmul_t(k)?.scale(scale).softmax();
            contexts.push(w.matmul(v)?);
            weights.push(w);
        }
        let ctx = concat(&contexts, 1)?.matmul(tape.param(store, self.w_output))?;
        Ok((ctx, weights))
    }

    pub fn mha_attend<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
    ) -> Result<Var<'t>> {
        let mem = self.memory(tape, store, keys, values)?;
        Ok(self.attend(tape, store, query, &mem)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Gate, Tensor};
    use crate::rng;
    use rand::Rng as _;

    fn setup(seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let group = store.add_group("attn", Gate::EncoderAttention);
        let mut r = rng::seeded(seed);
        let mut init = Init {
            store: &mut store,
            group,
            rng: &mut r,
        };
        let attn = MultiHeadAttention::new(&mut init, "a", 4, 4, 4, 2).unwrap();
        (store, attn)
    }

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_projected_value() {
        let (store, attn) = setup(1);
        let tape = Tape::new();
        let v = tape.constant(rand_t(1, 4, 2));
        let ctx = attn
            .mha_attend(&tape, &store, tape.constant(rand_t(1, 4, 3)), tape.constant(rand_t(1, 4, 4)), v)
            .unwrap();
        let expect = v
            .matmul(tape.param(&store, attn.w_value))
            .unwrap()
            .matmul(tape.param(&store, attn.w_output))
            .unwrap();
        assert!(ctx.value().max_abs_diff(&expect.value()) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let (store, attn) = setup(5);
        let tape = Tape::new();
        let key_row = rand_t(1, 4, 6);
        let keys = Tensor::matrix(3, 4, key_row.data().repeat(3)).unwrap();
        let values = rand_t(3, 4, 7);
        let mean: Vec<f64> = (0..4)
            .map(|c| (0..3).map(|r| values.at(r, c)).sum::<f64>() / 3.0)
            .collect();
        let ctx = attn
            .mha_attend(&tape, &store, tape.constant(rand_t(1, 4, 8)), tape.constant(keys), tape.constant(values))
            .unwrap();
        let expect = tape
            .constant(Tensor::row(mean))
            .matmul(tape.param(&store, attn.w_value))
            .unwrap()
            .matmul(tape.param(&store, attn.w_output))
            .unwrap();
        assert!(ctx.value().max_abs_diff(&expect.value()) < 1e-12);
    }

    #[test]
    fn empty_source_is_an_error() {
        let (store, attn) = setup(9);
        let tape = Tape::new();
        let empty = tape.constant(Tensor::zeros(&[0, 4]));
        assert!(attn.memory(&tape, &store, empty, empty).is_err());
    }

    #[test]
    fn head_weights_are_normalized() {
        let (store, attn) = setup(10);
        let tape = Tape::new();
        let src = tape.constant(rand_t(5, 4, 11));
        let mem = attn.memory(&tape, &store, src, src).unwrap();
        let (_, w) = attn.attend(&tape, &store, tape.constant(rand_t(1, 4, 12)), &mem).unwrap();
        for wh in w {
            assert!((wh.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
