//! Component ablation over progressive training (P), multi-stage
//! interaction (M) and recursive mosaics (R).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::{Dataset, TransformMode};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport};
use crate::model::ModelConfig;
use crate::trainer::{fit, FitOptions, TrainConfig, TrainingMechanisms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, PartialOrd, Ord, Hash)]
pub struct Toggles {
    pub p: bool,
    pub m: bool,
    pub r: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles { p: true, m: true, r: true };

    /// Mosaics only exist as inputs to progressive phases.
    pub fn validate(&self) -> Result<()> {
        if self.r && !self.p {
            return Err(Error::InvalidCombo("R requires P".into()));
        }
        Ok(())
    }

    /// Every valid subset, in table order: baseline, +M, +P, +P&M, +P&R, +P&M&R.
    pub fn variants(&self) -> Result<Vec<Toggles>> {
        self.validate()?;
        let order = [
            Toggles::default(),
            Toggles { m: true, ..Toggles::default() },
            Toggles { p: true, ..Toggles::default() },
            Toggles { p: true, m: true, r: false },
            Toggles { p: true, m: false, r: true },
            Toggles::ALL,
        ];
        Ok(order
            .into_iter()
            .filter(|t| (!t.p || self.p) && (!t.m || self.m) && (!t.r || self.r))
            .collect())
    }

    /// Model and training configuration of this variant. The baseline is a
    /// single classifier on the last stage; variants without M bypass gates.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
        self.validate()?;
        let mut model = model.clone();
        let mut train = train.clone();
        if !self.p && !self.m {
            model.stage_num = 1;
            train.stage_num = 1;
        }
        model.interaction = self.m;
        train.mechanisms = TrainingMechanisms {
            progressive: self.p,
            mosaic: self.r,
        };
        Ok((model, train))
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.p, "P"), (self.m, "M"), (self.r, "R")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            write!(f, "+{}", parts.join("&"))
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Letters from `{P, M, R}`, optionally separated by `,`, `&`, `+` or
    /// spaces; empty or `baseline` means none.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::default();
        if s.trim().eq_ignore_ascii_case("baseline") {
            return Ok(t);
        }
        for ch in s.chars().filter(|c| !matches!(c, ',' | '&' | '+' | ' ')) {
            match ch.to_ascii_uppercase() {
                'P' => t.p = true,
                'M' => t.m = true,
                'R' => t.r = true,
                other => return Err(Error::InvalidCombo(format!("unknown component `{other}`"))),
            }
        }
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Toggles,
    pub test: EvalReport,
    pub epochs: usize,
}

/// Trains every variant on the same data and seed, evaluating on `test`.
pub fn run_ablation(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    toggles: Toggles,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in toggles.variants()? {
        let (m, t) = variant.apply(model, train)?;
        log::info!("ablation: training {variant}");
        let mut result = fit(train_set, &m, &t, FitOptions::default())?;
        let test = evaluate(&mut result.model, test_set, &t.transform.with_mode(TransformMode::Eval))?;
        rows.push(AblationRow {
            variant,
            test,
            epochs: result.epochs_completed,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,P,M,R,acc_concat,acc_mix\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            r.variant,
            u8::from(r.variant.p),
            u8::from(r.variant.m),
            u8::from(r.variant.r),
            r.test.acc_concat,
            r.test.acc_mix
        );
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<10}  {:^3}  {:^3}  {:^3}  {:>8}  {:>8}\n", "Method", "P", "M", "R", "Concat", "Mix");
    let _ = writeln!(out, "{}", "-".repeat(44));
    let mark = |b: bool| if b { "x" } else { "" };
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10}  {:^3}  {:^3}  {:^3}  {:>8.2}  {:>8.2}",
            r.variant.to_string(),
            mark(r.variant.p),
            mark(r.variant.m),
            mark(r.variant.r),
            100.0 * r.test.acc_concat,
            100.0 * r.test.acc_mix
        );
    }
    out
}
