//! Central finite-difference checks of [`Tape::backward`].

use std::fmt::Write as _;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::CTensor;

/// Which half of a complex coordinate is perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

/// One perturbed coordinate: `(input index, flat entry index, part)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub entry: usize,
    pub part: Part,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,input,entry,part,analytic,numeric,abs_error,rel_error\n");
        for e in &self.entries {
            let part = match e.coord.part {
                Part::Re => "re",
                Part::Im => "im",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:.12e},{:.12e},{:.3e},{:.3e}",
                self.name,
                e.coord.input,
                e.coord.entry,
                part,
                e.analytic,
                e.numeric,
                e.abs_error,
                e.rel_error
            );
        }
        out
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Every real coordinate of every input.
pub fn all_coords(inputs: &[CTensor]) -> Vec<Coord> {
    let mut coords = Vec::new();
    for (input, t) in inputs.iter().enumerate() {
        for entry in 0..t.len() {
            for part in [Part::Re, Part::Im] {
                coords.push(Coord { input, entry, part });
            }
        }
    }
    coords
}

fn evaluate<F>(f: &F, inputs: &[CTensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item()?.re)
}

/// Compares the reverse-mode gradient of the real scalar `f(inputs)` with
/// central differences of step `step` on `coords` (all coordinates when
/// `None`).
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[CTensor],
    step: f64,
    tolerance: f64,
    coords: Option<&[Coord]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<CTensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let owned;
    let coords = match coords {
        Some(c) => c,
        None => {
            owned = all_coords(inputs);
            &owned
        }
    };
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel: f64 = 0.0;
    for &coord in coords {
        let mut shifted = inputs.to_vec();
        let base = inputs[coord.input].data()[coord.entry];
        let delta = match coord.part {
            Part::Re => crate::C64::new(step, 0.0),
            Part::Im => crate::C64::new(0.0, step),
        };
        shifted[coord.input].data_mut()[coord.entry] = base + delta;
        let plus = evaluate(&f, &shifted)?;
        shifted[coord.input].data_mut()[coord.entry] = base - delta;
        let minus = evaluate(&f, &shifted)?;
        let numeric = (plus - minus) / (2.0 * step);
        let g = analytic[coord.input].data()[coord.entry];
        let a = match coord.part {
            Part::Re => g.re,
            Part::Im => g.im,
        };
        let rel = relative_error(a, numeric);
        max_rel = max_rel.max(rel);
        entries.push(GradCheckEntry {
            coord,
            analytic: a,
            numeric,
            abs_error: (a - numeric).abs(),
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        step,
        tolerance,
        entries,
        max_rel_error: max_rel,
    })
}
