//! Attention-map export as TSV tables and grayscale SVG heatmaps.

use std::fmt::Write as _;

use attconv::model::AttentionMap;
use attconv::text::Vocabulary;

fn labels(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    vocab.decode(ids)
}

/// Header row: an empty corner cell, then one column per context token.
/// Each following row is a target token and its attention weights.
pub fn to_tsv(map: &AttentionMap, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for t in labels(vocab, &map.col_ids) {
        out.push('\t');
        out.push_str(&t);
    }
    out.push('\n');
    for (i, t) in labels(vocab, &map.row_ids).iter().enumerate() {
        out.push_str(t);
        for w in map.weights.row(i) {
            let _ = write!(out, "\t{w}");
        }
        out.push('\n');
    }
    out
}

/// Parsed TSV: column tokens, then `(row token, weights)` pairs.
pub type ParsedTsv = (Vec<String>, Vec<(String, Vec<f64>)>);

pub fn parse_tsv(s: &str) -> Result<ParsedTsv, String> {
    let mut lines = s.lines();
    let header = lines.next().ok_or("empty table")?;
    let mut cols = header.split('\t');
    if cols.next() != Some("") {
        return Err("header must start with an empty cell".into());
    }
    let cols: Vec<String> = cols.map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut cells = line.split('\t');
        let token = cells.next().unwrap_or_default().to_string();
        let weights = cells
            .map(|c| c.parse::<f64>().map_err(|e| format!("row {}: {e}", n + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        if weights.len() != cols.len() {
            return Err(format!(
                "row {} has {} weights for {} columns",
                n + 1,
                weights.len(),
                cols.len()
            ));
        }
        rows.push((token, weights));
    }
    Ok((cols, rows))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const CELL: usize = 24;

/// Shade of a weight: 255 for 0 (white), 0 for 1 (black).
pub fn gray_level(w: f64) -> u8 {
    (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8
}

/// One cell per (target, context) pair, target tokens down the left and
/// context tokens along the top.
pub fn to_svg(map: &AttentionMap, vocab: &Vocabulary) -> String {
    let rows = labels(vocab, &map.row_ids);
    let cols = labels(vocab, &map.col_ids);
    let longest = |v: &[String]| v.iter().map(|s| s.chars().count()).max().unwrap_or(0);
    let left = 8 * longest(&rows) + 12;
    let top = 8 * longest(&cols) + 12;
    let width = left + CELL * cols.len() + 4;
    let height = top + CELL * rows.len() + 4;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    );
    for (j, t) in cols.iter().enumerate() {
        let x = left + CELL * j + CELL / 2;
        let y = top - 6;
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" transform="rotate(-90 {x} {y})">{}</text>"#,
            escape(t)
        );
    }
    for (i, t) in rows.iter().enumerate() {
        let y = top + CELL * i + CELL / 2 + 4;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#,
            left - 6,
            escape(t)
        );
        for (j, w) in map.weights.row(i).iter().enumerate() {
            let g = gray_level(*w);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"><title>{w}</title></rect>"#,
                left + CELL * j,
                top + CELL * i
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
