//! TSPLIB ingestion, EUC_2D subset only.
//!
//! Coordinates are min-max normalized into the unit square for model input;
//! the raw coordinates are retained so gaps can be computed with the TSPLIB
//! rounding convention (edge weights rounded to the nearest integer).

use super::{check_permutation, InstanceError, Source, TspInstance};

/// TSPLIB EUC_2D edge weight: Euclidean distance rounded to nearest integer.
pub fn tsplib_edge(a: [f64; 2], b: [f64; 2]) -> i64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    (d + 0.5).floor() as i64
}

/// Integer cycle length of `order` over the raw coordinates.
pub fn tsplib_tour_cost(raw: &[[f64; 2]], order: &[u32]) -> Result<i64, InstanceError> {
    check_permutation(raw.len(), order)?;
    let n = raw.len();
    let mut total = 0;
    for k in 0..n {
        total += tsplib_edge(raw[order[k] as usize], raw[order[(k + 1) % n] as usize]);
    }
    Ok(total)
}

pub fn parse_tsplib(text: &str) -> Result<TspInstance, InstanceError> {
    let err = |m: &str| InstanceError::Tsplib(m.to_string());
    let mut name = String::from("unnamed");
    let mut dimension: Option<usize> = None;
    let mut edge_type: Option<String> = None;
    let mut lines = text.lines().peekable();

    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "NODE_COORD_SECTION" {
            let dim = dimension.ok_or_else(|| err("DIMENSION missing"))?;
            match edge_type.as_deref() {
                Some("EUC_2D") => {}
                Some(other) => {
                    return Err(InstanceError::Tsplib(format!(
                        "unsupported EDGE_WEIGHT_TYPE: {other}"
                    )))
                }
                None => return Err(err("EDGE_WEIGHT_TYPE missing")),
            }
            let mut raw = Vec::with_capacity(dim);
            for line in lines.by_ref() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                if line == "EOF" {
                    break;
                }
                let mut it = line.split_whitespace();
                let _id = it.next().ok_or_else(|| err("bad coord line"))?;
                let x: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad x coordinate"))?;
                let y: f64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad y coordinate"))?;
                raw.push([x, y]);
            }
            if raw.len() != dim {
                return Err(InstanceError::Tsplib(format!(
                    "DIMENSION {dim} but {} coordinates",
                    raw.len()
                )));
            }
            let coords = normalize(&raw);
            return Ok(TspInstance {
                coords,
                raw_coords: Some(raw),
                ref_tour: None,
                ref_cost: None,
                source: Source::Tsplib { name },
            });
        }
        let (key, value) = match line.split_once(':') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => (line, ""),
        };
        match key {
            "NAME" => name = value.to_string(),
            "DIMENSION" => {
                dimension = Some(value.parse().map_err(|_| err("bad DIMENSION"))?);
            }
            "EDGE_WEIGHT_TYPE" => edge_type = Some(value.to_string()),
            _ => {} // TYPE, COMMENT, etc.
        }
    }
    Err(err("NODE_COORD_SECTION missing"))
}

fn normalize(raw: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in raw {
        for a in 0..2 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    // One shared scale so the geometry is preserved.
    let span = (max[0] - min[0]).max(max[1] - min[1]).max(f64::MIN_POSITIVE);
    raw.iter()
        .map(|p| [(p[0] - min[0]) / span, (p[1] - min[1]) / span])
        .collect()
}
