//! Plain (P2) PGM images for grayscale visualizations.

use std::io::Write;
use std::path::Path;

/// One row of pixels per scanline, maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut out = String::with_capacity(pixels.len() * 4 + 32);
    out.push_str(&format!("P2\n{width} {height}\n255\n"));
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())
}

/// Parse a plain PGM back to (width, height, pixels). Used by tests to
/// verify exported images.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace());
    if tokens.next() != Some("P2") {
        return Err("not a plain PGM".into());
    }
    let mut next_num = |what: &str| -> Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what}"))?
            .parse()
            .map_err(|_| format!("bad {what}"))
    };
    let width = next_num("width")?;
    let height = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let v = next_num("pixel")?;
        if v > 255 {
            return Err(format!("pixel {v} out of range"));
        }
        pixels.push(v as u8);
    }
    Ok((width, height, pixels))
}
