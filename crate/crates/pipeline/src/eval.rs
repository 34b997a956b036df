//! Re-checks the invariants of an augmented output directory.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use stda_core::io::load_patch;
use stda_core::{Patch, PlacementModel};

use crate::augment::{OutputEntry, ANNOTATIONS_FILE, MODEL_FILE, OUTPUTS_FILE};
use crate::dataset::{load_annotations, read_jsonl, AnnotationRecord, REAL_LOSS_WEIGHT, SYNTHETIC_LOSS_WEIGHT};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub checked: usize,
    pub violations: Vec<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub checks: Vec<Check>,
}

impl EvalReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>8} {:>10}  result\n", "check", "checked", "violations");
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            s.push_str(&format!(
                "{:<28} {:>8} {:>10}  {verdict}\n",
                c.name,
                c.checked,
                c.violations.len()
            ));
            for v in c.violations.iter().take(5) {
                s.push_str(&format!("    {v}\n"));
            }
        }
        s
    }
}

/// Whether every pixel outside the union of `rects` agrees bit-exactly.
pub fn unchanged_outside(before: &Patch, after: &Patch, rects: &[(i64, i64, i64, i64)]) -> bool {
    if before.dims() != after.dims() {
        return false;
    }
    let (h, w) = before.dims();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as i64, x as i64);
            let covered = rects
                .iter()
                .any(|&(x0, y0, x1, y1)| xi >= x0 && xi < x1 && yi >= y0 && yi < y1);
            if !covered && before.pixel(y, x) != after.pixel(y, x) {
                return false;
            }
        }
    }
    true
}

pub fn evaluate(out_dir: &Path) -> Result<EvalReport> {
    let records = load_annotations(out_dir.join(ANNOTATIONS_FILE))?;
    let outputs: Vec<OutputEntry> = read_jsonl(out_dir.join(OUTPUTS_FILE))?;
    let model_path = out_dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let model: PlacementModel = serde_json::from_str(&text)?;

    let mut by_image: HashMap<&str, Vec<&AnnotationRecord>> = HashMap::new();
    for r in &records {
        by_image.entry(r.image.as_str()).or_default().push(r);
    }

    let mut weight = Check::new("loss weight matches flag");
    for r in &records {
        let expected = if r.synthetic {
            SYNTHETIC_LOSS_WEIGHT
        } else {
            REAL_LOSS_WEIGHT
        };
        weight.record(r.loss_weight == expected, || {
            format!("{}: synthetic={} loss_weight={}", r.image, r.synthetic, r.loss_weight)
        });
    }

    let mut inside = Check::new("boxes inside image");
    let mut law = Check::new("placement law within jitter");
    let mut outside = Check::new("pixels outside boxes kept");
    for o in &outputs {
        let source = load_patch(&o.source)?;
        let after = load_patch(out_dir.join(&o.output))?;
        let (h, w) = after.dims();
        let m = model.rescaled(h, w);
        let recs = by_image.get(o.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut rects = Vec::new();
        for r in recs.iter().filter(|r| r.synthetic) {
            inside.record(r.bbox.fits_in(h, w), || {
                format!("{}: {:?} outside {h}x{w}", o.id, r.bbox)
            });
            let line = m.line_height(r.bbox.y_bottom());
            let tol = m.jitter * line.abs() + 1e-9;
            law.record((r.bbox.height - line).abs() <= tol, || {
                format!("{}: height {} vs line {line}", o.id, r.bbox.height)
            });
            rects.push(r.bbox.pixel_rect());
        }
        outside.record(unchanged_outside(&source, &after, &rects), || {
            format!("{}: pixels changed outside synthetic boxes", o.id)
        });
    }
    Ok(EvalReport {
        checks: vec![weight, inside, law, outside],
    })
}
