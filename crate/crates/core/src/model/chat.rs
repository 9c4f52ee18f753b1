//! Context-aware heterogeneous graph attention block.
//!
//! For a relation `r` and an edge `j → i`, the raw score is
//! `a_r · [x̃_i ‖ x̃_j ‖ c_i ‖ c_j ‖ d_ij/ε]` passed through a leaky ReLU.
//! Because the scorer is linear in the concatenation it is evaluated as a sum
//! of per-target, per-source and per-edge terms, so no per-edge feature
//! vectors are materialized. Scores are softmax-normalized over each target's
//! neighborhood, the neighbors' `W^r x̃_j` are aggregated with those weights,
//! and the four relation outputs are concatenated and fused back to width `d`.
//! The `[4d × d]` fusion matrix is stored as one `d × d` block per relation,
//! so relations that do not reach a station kind are skipped rather than
//! multiplied as zero blocks.

use ndarray::Array2;
use rand::Rng;

use super::batch::{GraphBatch, RelationEdges};
use crate::error::Result;
use crate::geo::{Relation, StationKind};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub dst: Var,
    pub src: Var,
    pub ctx_dst: Var,
    pub ctx_src: Var,
    pub dist: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ChatLayerVars {
    pub attn: [AttnVars; 4],
    pub gconv: [Var; 4],
    pub fuse: [Var; 4],
}

/// Attention weights of one relation, as `(target row, source row, weight)`
/// within the first batch copy.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    pub relation: Relation,
    pub weights: Vec<(usize, usize, f64)>,
}

pub fn init_chat_layer<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    c_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (d as f64).sqrt();
    for rel in Relation::ALL {
        let p = format!("{prefix}.attn.{}", rel.key());
        store.insert_uniform(format!("{p}.dst"), d, 1, bound, rng)?;
        store.insert_uniform(format!("{p}.src"), d, 1, bound, rng)?;
        store.insert_uniform(format!("{p}.ctx_dst"), c_dim, 1, bound, rng)?;
        store.insert_uniform(format!("{p}.ctx_src"), c_dim, 1, bound, rng)?;
        store.insert_uniform(format!("{p}.dist"), 1, 1, bound, rng)?;
        store.insert_uniform(format!("{prefix}.gconv.{}", rel.key()), d, d, bound, rng)?;
        store.insert_uniform(format!("{prefix}.fuse.{}", rel.key()), d, d, bound, rng)?;
    }
    Ok(())
}

impl ChatLayerVars {
    pub fn load(tape: &Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut attn = Vec::with_capacity(4);
        let mut gconv = Vec::with_capacity(4);
        let mut fuse = Vec::with_capacity(4);
        for rel in Relation::ALL {
            let p = format!("{prefix}.attn.{}", rel.key());
            attn.push(AttnVars {
                dst: store.var(tape, &format!("{p}.dst"))?,
                src: store.var(tape, &format!("{p}.src"))?,
                ctx_dst: store.var(tape, &format!("{p}.ctx_dst"))?,
                ctx_src: store.var(tape, &format!("{p}.ctx_src"))?,
                dist: store.var(tape, &format!("{p}.dist"))?,
            });
            gconv.push(store.var(tape, &format!("{prefix}.gconv.{}", rel.key()))?);
            fuse.push(store.var(tape, &format!("{prefix}.fuse.{}", rel.key()))?);
        }
        Ok(ChatLayerVars {
            attn: attn.try_into().expect("four relations"),
            gconv: gconv.try_into().expect("four relations"),
            fuse: fuse.try_into().expect("four relations"),
        })
    }
}

/// Raw (pre-softmax) attention score of every edge of one relation, `[E×1]`.
#[allow(clippy::too_many_arguments)]
pub fn relation_scores(
    tape: &Tape,
    attn: &AttnVars,
    x_target: Var,
    x_source: Var,
    ctx_target: Var,
    ctx_source: Var,
    edges: &RelationEdges,
    alpha: f64,
) -> Result<Var> {
    let u = tape.add(
        tape.matmul(x_target, attn.dst)?,
        tape.matmul(ctx_target, attn.ctx_dst)?,
    )?;
    let v = tape.add(
        tape.matmul(x_source, attn.src)?,
        tape.matmul(ctx_source, attn.ctx_src)?,
    )?;
    let dist = tape.constant(edges.dist.clone());
    let score = tape.add(
        tape.gather_rows(u, edges.dst.clone())?,
        tape.gather_rows(v, edges.src.clone())?,
    )?;
    let score = tape.add(score, tape.scale_by(dist, attn.dist)?)?;
    Ok(tape.leaky_relu(score, alpha))
}

/// Normalized attention weight of every edge of one relation, `[E×1]`.
#[allow(clippy::too_many_arguments)]
pub fn relation_attention(
    tape: &Tape,
    attn: &AttnVars,
    x_target: Var,
    x_source: Var,
    ctx_target: Var,
    ctx_source: Var,
    edges: &RelationEdges,
    target_rows: usize,
    alpha: f64,
) -> Result<Var> {
    let score = relation_scores(tape, attn, x_target, x_source, ctx_target, ctx_source, edges, alpha)?;
    tape.segment_softmax(score, edges.dst.clone(), target_rows)
}

/// `leaky_relu(Σ_j α_ij W^r x̃_j)` for every target row, `[target_rows × d]`.
pub fn gconv(
    tape: &Tape,
    weight: Var,
    attention: Var,
    x_source: Var,
    edges: &RelationEdges,
    target_rows: usize,
    alpha: f64,
) -> Result<Var> {
    let projected = tape.matmul(x_source, weight)?;
    let messages = tape.gather_rows(projected, edges.src.clone())?;
    let weighted = tape.mul_col(messages, attention)?;
    let agg = tape.scatter_add_rows(weighted, edges.dst.clone(), target_rows)?;
    Ok(tape.leaky_relu(agg, alpha))
}

/// One attention layer over all stations; `x[k]` holds kind `k`'s rows.
pub fn chat_layer(
    tape: &Tape,
    layer: &ChatLayerVars,
    x: &[Var; 2],
    context: &[Var; 2],
    batch: &GraphBatch,
    alpha: f64,
    mut record: Option<&mut Vec<AttentionSnapshot>>,
) -> Result<[Var; 2]> {
    let d = tape.shape(x[0]).1;
    let mut fused: [Option<Var>; 2] = [None, None];
    for rel in Relation::ALL {
        let (ks, kt) = (rel.source().index(), rel.target().index());
        let rows = batch.rows(rel.target());
        let edges = &batch.edges[rel.index()];
        if edges.is_empty() {
            continue;
        }
        let att = relation_attention(
            tape,
            &layer.attn[rel.index()],
            x[kt],
            x[ks],
            context[kt],
            context[ks],
            edges,
            rows,
            alpha,
        )?;
        if let Some(rec) = record.as_deref_mut() {
            let w = tape.value(att);
            let per_copy = batch.counts[kt];
            let weights = edges
                .dst
                .iter()
                .zip(edges.src.iter())
                .enumerate()
                .filter(|(_, (&t, _))| t < per_copy)
                .map(|(e, (&t, &s))| (t, s, w[[e, 0]]))
                .collect();
            rec.push(AttentionSnapshot {
                relation: rel,
                weights,
            });
        }
        let out = gconv(tape, layer.gconv[rel.index()], att, x[ks], edges, rows, alpha)?;
        let part = tape.matmul(out, layer.fuse[rel.index()])?;
        fused[kt] = Some(match fused[kt] {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let mut next = [x[0], x[1]];
    for kind in StationKind::ALL {
        let k = kind.index();
        let pre = fused[k].unwrap_or_else(|| tape.constant(Array2::zeros((batch.rows(kind), d))));
        next[k] = tape.leaky_relu(pre, alpha);
    }
    Ok(next)
}
