//! ASCII PGM (P2) writing and a minimal reader for round-trip checks.
//!
//! Values are min-max normalized to 0..255; a constant map renders as all
//! zeros. Lines are wrapped below 70 characters per the P2 grammar.

use crate::{Error, Result};

/// Render a (height, width) map to P2 text.
pub fn to_p2_string(values: &[f64], width: usize, height: usize) -> Result<String> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "{} values for a {width}x{height} map",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pgm input".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!("{width} {height}\n255\n"));
    let mut line = String::new();
    for row in values.chunks(width) {
        for &v in row {
            let g = ((v - lo) * scale).round() as u32;
            let tok = g.to_string();
            if !line.is_empty() && line.len() + 1 + tok.len() > 69 {
                out.push_str(&line);
                out.push('\n');
                line.clear();
            }
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&tok);
        }
        out.push_str(&line);
        out.push('\n');
        line.clear();
    }
    Ok(out)
}

/// Parse P2 text back into (width, height, grays).
pub fn from_p2_string(text: &str) -> Result<(usize, usize, Vec<u16>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace());
    let magic = tokens.next().ok_or_else(|| Error::Format("empty pgm".into()))?;
    if magic != "P2" {
        return Err(Error::Format(format!("expected P2, got {magic}")));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("pgm missing {what}")))?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("pgm bad {what}")))
    };
    let width = next_num("width")?;
    let height = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("pgm maxval {maxval}")));
    }
    let mut grays = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let g = next_num("sample")?;
        if g > maxval {
            return Err(Error::Format(format!("sample {g} exceeds maxval {maxval}")));
        }
        grays.push(g as u16);
    }
    if tokens.next().is_some() {
        return Err(Error::Format("trailing pgm tokens".into()));
    }
    Ok((width, height, grays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let values: Vec<f64> = (0..12).map(|i| (i as f64 * 0.31).sin()).collect();
        let text = to_p2_string(&values, 4, 3).unwrap();
        let (w, h, grays) = from_p2_string(&text).unwrap();
        assert_eq!((w, h), (4, 3));
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (&g, &v) in grays.iter().zip(&values) {
            let expect = (v - lo) / (hi - lo) * 255.0;
            assert!((g as f64 - expect).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn constant_map_is_all_zero() {
        let text = to_p2_string(&[3.5; 6], 3, 2).unwrap();
        let (_, _, grays) = from_p2_string(&text).unwrap();
        assert!(grays.iter().all(|&g| g == 0));
    }

    #[test]
    fn lines_stay_short() {
        let values: Vec<f64> = (0..900).map(|i| i as f64).collect();
        let text = to_p2_string(&values, 30, 30).unwrap();
        for line in text.lines() {
            assert!(line.len() <= 70, "line too long: {}", line.len());
        }
    }

    #[test]
    fn reader_rejects_garbage() {
        assert!(from_p2_string("P5\n1 1\n255\n0\n").is_err());
        assert!(from_p2_string("P2\n2 2\n255\n0 1 2\n").is_err());
        assert!(from_p2_string("P2\n1 1\n255\n999\n").is_err());
    }
}
