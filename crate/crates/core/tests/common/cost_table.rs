//! Hand-derived cost table of the two-stage, four-channel configuration
//! (`n1 = n2 = 1`, 16×16 patch, 4 heads, key budget 256).

use vesselnext::model::CostRow;

/// `(params, MACs)` of a `k×k` convolution with bias over an `h×w` output.
pub fn conv(cin: usize, cout: usize, k: usize, groups: usize, hw: usize) -> (u64, u64) {
    let per_out = (cin / groups * k * k) as u64;
    (cout as u64 * per_out + cout as u64, cout as u64 * hw as u64 * per_out)
}

/// Affine layer normalisation over `c` channels.
pub fn norm(c: usize) -> (u64, u64) {
    (2 * c as u64, 0)
}

/// Score and mixing products of attention with `n` queries, `m` keys and
/// total width `c`.
pub fn attention_products(n: usize, m: usize, c: usize) -> (u64, u64) {
    (0, 2 * (n * m * c) as u64)
}

pub fn tiny_rows() -> Vec<CostRow> {
    let (c0, c1) = (4, 8);
    let (full, half) = (16 * 16, 8 * 8);
    let tokens = full + half;
    let mut rows: Vec<(String, (u64, u64))> = vec![
        ("enc.0.conv1".into(), conv(1, c0, 3, 1, full)),
        ("enc.0.norm1".into(), norm(c0)),
        ("enc.0.conv2".into(), conv(c0, c0, 3, 1, full)),
        ("enc.0.norm2".into(), norm(c0)),
        ("enc.1.proj".into(), conv(c0, c1, 1, 1, half)),
        ("enc.1.block.conv.dw".into(), conv(c1, c1, 7, c1, half)),
        ("enc.1.block.conv.norm".into(), norm(c1)),
        ("enc.1.block.conv.expand".into(), conv(c1, 4 * c1, 1, 1, half)),
        ("enc.1.block.conv.reduce".into(), conv(4 * c1, c1, 1, 1, half)),
        ("enc.1.block.attn_norm".into(), norm(c1)),
    ];
    for p in ["q", "k", "v", "out"] {
        rows.push((format!("enc.1.block.attn.{p}"), conv(c1, c1, 1, 1, half)));
    }
    rows.extend([
        ("enc.1.block.attn".into(), attention_products(half, half, c1)),
        ("enc.1.block.mlp.norm".into(), norm(c1)),
        ("enc.1.block.mlp.expand".into(), conv(c1, 4 * c1, 1, 1, half)),
        ("enc.1.block.mlp.reduce".into(), conv(4 * c1, c1, 1, 1, half)),
        ("gmsf.in.0".into(), conv(c0, c1, 1, 1, full)),
        ("gmsf.in.1".into(), conv(c1, c1, 1, 1, half)),
        // One learned vector per scale.
        ("gmsf.embed".into(), (2 * c1 as u64, 0)),
        ("gmsf.block.0.norm1".into(), norm(c1)),
    ]);
    for p in ["q", "k", "v", "out"] {
        rows.push((format!("gmsf.block.0.attn.{p}"), conv(c1, c1, 1, 1, tokens)));
    }
    rows.extend([
        ("gmsf.block.0.attn".into(), attention_products(tokens, tokens, c1)),
        ("gmsf.block.0.norm2".into(), norm(c1)),
        ("gmsf.block.0.fc1".into(), conv(c1, 4 * c1, 1, 1, tokens)),
        ("gmsf.block.0.fc2".into(), conv(4 * c1, c1, 1, 1, tokens)),
        ("gmsf.out.0".into(), conv(c1, c0, 1, 1, full)),
        ("gmsf.out.1".into(), conv(c1, c1, 1, 1, half)),
        ("dec.0.up.conv".into(), conv(c1, c0, 1, 1, full)),
        ("dec.0.conv1".into(), conv(2 * c0, c0, 3, 1, full)),
        ("dec.0.norm1".into(), norm(c0)),
        ("dec.0.conv2".into(), conv(c0, c0, 3, 1, full)),
        ("dec.0.norm2".into(), norm(c0)),
        ("head".into(), conv(c0, 1, 1, 1, full)),
    ]);
    rows.into_iter()
        .map(|(layer, (params, macs))| CostRow { layer, params, macs })
        .collect()
}

/// Row-by-row differences between a report and [`tiny_rows`].
pub fn tiny_mismatches(got: &[CostRow]) -> Vec<String> {
    let want = tiny_rows();
    let mut out = Vec::new();
    if got.len() != want.len() {
        out.push(format!("{} rows, expected {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(&want) {
        if g != w {
            out.push(format!("got {g:?}, expected {w:?}"));
        }
    }
    out
}
