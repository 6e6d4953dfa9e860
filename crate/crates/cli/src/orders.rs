use maskfix::pixel::{encode_pgm, GrayImage};
use maskfix::sequencing::{build_order, OrderKind};

use crate::exit::{CliError, FAILURE};
use crate::manifest::{write_output, RunManifest};
use crate::OrdersArgs;

/// Gray level of each cell: its visit rank scaled to the full range, so the
/// first visited cell is black and the last white.
pub fn rank_image(kind: OrderKind, h: usize, w: usize, seed: u64) -> Result<GrayImage, CliError> {
    let n = h * w;
    let maxval: u16 = if n <= 256 { 255 } else { 65535 };
    let ranks = build_order(kind, h, w, seed).ranks();
    let span = (n - 1).max(1) as f64;
    let data = ranks
        .iter()
        .map(|&r| (r as f64 * maxval as f64 / span).round() as u16)
        .collect();
    GrayImage::new(h, w, maxval, data).map_err(|e| CliError::new(FAILURE, e))
}

fn kinds(args: &OrdersArgs) -> Result<Vec<OrderKind>, CliError> {
    if args.kind.is_empty() || args.kind.iter().any(|k| k == "all") {
        return Ok(OrderKind::ALL.to_vec());
    }
    args.kind
        .iter()
        .map(|k| k.parse().map_err(|e| CliError::config(format!("--kind: {e}"))))
        .collect()
}

pub fn run(args: &OrdersArgs) -> Result<(), CliError> {
    let (h, w) = match (args.size, args.height, args.width) {
        (Some(s), _, _) => (s, s),
        (None, Some(h), Some(w)) => (h, w),
        _ => (16, 16),
    };
    if h == 0 || w == 0 {
        return Err(CliError::config("grid size must be positive"));
    }
    let kinds = kinds(args)?;

    let mut manifest = RunManifest::new("orders", args.seed, &args.out);
    manifest.set("height", h);
    manifest.set("width", w);
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    manifest.set("kinds", names.join(","));
    manifest.write()?;

    for kind in kinds {
        let image = rank_image(kind, h, w, args.seed)?;
        write_output(&args.out, &format!("{kind}.pgm"), encode_pgm(&image))?;
    }
    Ok(())
}
