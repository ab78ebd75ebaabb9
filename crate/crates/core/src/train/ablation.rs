use std::fmt::Write as _;

use crate::config::{CvConfig, ModelConfig, Pooling, PromptSource, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{cross_validate, mean_report, CvReport, MetricsReport};

/// One row of an ablation: a set of model switches applied over a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub adapters: bool,
    pub prompt: PromptSource,
    pub emitter: bool,
    /// Diagnosis-token count; `None` keeps the base value.
    pub diag_tokens: Option<usize>,
    pub pooling: Pooling,
}

impl Variant {
    fn preset(name: &str, adapters: bool, prompt: PromptSource, emitter: bool, pooling: Pooling) -> Self {
        Variant {
            name: name.into(),
            adapters,
            prompt,
            emitter,
            diag_tokens: if prompt == PromptSource::None { Some(0) } else { None },
            pooling,
        }
    }

    /// The six standard rows, from frozen baseline to engine plus emitter.
    pub fn standard() -> Vec<Variant> {
        use PromptSource::*;
        vec![
            Self::preset("baseline", false, None, false, Pooling::Source),
            Self::preset("+adapter", true, None, false, Pooling::Source),
            Self::preset("+coop", true, Fixed, false, Pooling::Diagnosis),
            Self::preset("+cocoop", true, Conditional, false, Pooling::Diagnosis),
            Self::preset("+engine", true, Engine, false, Pooling::Diagnosis),
            Self::preset("+engine+emitter", true, Engine, true, Pooling::Diagnosis),
        ]
    }

    /// A preset name (`baseline`, `adapter`, `coop`, `cocoop`, `engine`,
    /// `engine+emitter`, leading `+` optional) or a comma-separated switch
    /// list such as `adapters=on,prompt=engine,emitter=off,m=2,pooling=diagnosis`.
    pub fn parse(text: &str) -> Result<Variant> {
        let text = text.trim();
        if !text.contains('=') {
            let want = text.trim_start_matches('+');
            return Self::standard()
                .into_iter()
                .find(|v| v.name.trim_start_matches('+') == want)
                .ok_or_else(|| Error::Config(format!("unknown ablation variant '{text}'")));
        }
        let mut v = Variant {
            name: text.into(),
            adapters: true,
            prompt: PromptSource::Engine,
            emitter: true,
            diag_tokens: None,
            pooling: Pooling::Diagnosis,
        };
        for part in text.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("switch '{part}' is not key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("invalid value '{value}' for switch '{key}'"));
            let on_off = || match value {
                "on" | "true" => Ok(true),
                "off" | "false" => Ok(false),
                _ => Err(bad()),
            };
            match key {
                "adapters" => v.adapters = on_off()?,
                "emitter" => v.emitter = on_off()?,
                "prompt" => {
                    v.prompt = match value {
                        "none" => PromptSource::None,
                        "fixed" => PromptSource::Fixed,
                        "conditional" => PromptSource::Conditional,
                        "engine" => PromptSource::Engine,
                        _ => return Err(bad()),
                    }
                }
                "m" => v.diag_tokens = Some(value.parse().map_err(|_| bad())?),
                "pooling" => {
                    v.pooling = match value {
                        "diagnosis" => Pooling::Diagnosis,
                        "source" => Pooling::Source,
                        "last" => Pooling::Last,
                        _ => return Err(bad()),
                    }
                }
                _ => return Err(Error::Config(format!("unknown ablation switch '{key}'"))),
            }
        }
        Ok(v)
    }

    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut c = base.clone();
        c.adapters = self.adapters;
        c.prompt = self.prompt;
        c.emitter = self.emitter;
        c.pooling = self.pooling;
        if let Some(m) = self.diag_tokens {
            c.diag_tokens = m;
        }
        c.validate()
            .map_err(|e| Error::Config(format!("variant {}: {e}", self.name)))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: CvReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cv_cfg: &CvConfig,
    ds: &Dataset,
    variants: &[Variant],
    parallel: bool,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    let configs = variants
        .iter()
        .map(|v| v.apply(base))
        .collect::<Result<Vec<_>>>()?;
    let rows = variants
        .iter()
        .zip(&configs)
        .map(|(v, c)| {
            Ok(AblationRow {
                variant: v.name.clone(),
                report: cross_validate(c, train_cfg, cv_cfg, ds, parallel)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Quotes a field holding a comma, quote or line break.
fn csv_field(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"")).into()
    } else {
        s.into()
    }
}

fn csv_line(out: &mut String, variant: &str, fold: &str, r: &MetricsReport) {
    writeln!(
        out,
        "{},{fold},{:.6},{:.6},{:.6},{},{}",
        csv_field(variant),
        r.sensitivity,
        r.specificity,
        r.accuracy,
        fmt_opt(r.auc),
        fmt_opt(r.avg)
    )
    .unwrap();
}

/// Per-fold rows plus a `mean` row for each named report.
pub fn format_cv_csv(rows: &[(&str, &CvReport)]) -> String {
    let mut out = String::from("variant,fold,sens,spec,acc,auc,avg\n");
    for (name, report) in rows {
        for (i, r) in report.folds.iter().enumerate() {
            csv_line(&mut out, name, &i.to_string(), r);
        }
        csv_line(&mut out, name, "mean", &report.mean);
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let rows: Vec<(&str, &CvReport)> = self.rows.iter().map(|r| (r.variant.as_str(), &r.report)).collect();
        format_cv_csv(&rows)
    }

    /// Mean metrics per variant in percent, stamped with the config hash.
    pub fn to_markdown(&self, config_hash: &str) -> String {
        let mut out = String::from("| Variant | Sens. | Spec. | Acc. | AUC | AVG |\n|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let m = &row.report.mean;
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                row.variant,
                pct(Some(m.sensitivity)),
                pct(Some(m.specificity)),
                pct(Some(m.accuracy)),
                pct(m.auc),
                pct(m.avg)
            )
            .unwrap();
        }
        writeln!(out, "\nconfig hash: `{config_hash}`").unwrap();
        out
    }

    pub fn mean_avg(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.report.mean.avg)
    }
}

/// The same ablation repeated under shifted seeds (training shuffle, fold
/// assignment, trainable-parameter init).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationStudy {
    pub offsets: Vec<u64>,
    pub tables: Vec<AblationTable>,
}

pub fn run_ablation_study(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cv_cfg: &CvConfig,
    ds: &Dataset,
    variants: &[Variant],
    repeats: usize,
    parallel: bool,
) -> Result<AblationStudy> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut study = AblationStudy {
        offsets: Vec::with_capacity(repeats),
        tables: Vec::with_capacity(repeats),
    };
    for r in 0..repeats as u64 {
        let model = ModelConfig {
            init_seed: base.init_seed.wrapping_add(r),
            ..base.clone()
        };
        let train = TrainConfig {
            seed: train_cfg.seed.wrapping_add(r),
            ..train_cfg.clone()
        };
        let cv = CvConfig {
            seed: cv_cfg.seed.wrapping_add(r),
            ..cv_cfg.clone()
        };
        study.offsets.push(r);
        study
            .tables
            .push(run_ablation(&model, &train, &cv, ds, variants, parallel)?);
    }
    Ok(study)
}

/// Outcome of comparing two variants' mean AVG across repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub expected_higher: String,
    pub expected_lower: String,
    pub higher_avg: f64,
    pub lower_avg: f64,
    pub reversed: bool,
}

impl AblationStudy {
    pub fn variants(&self) -> Vec<&str> {
        self.tables[0].rows.iter().map(|r| r.variant.as_str()).collect()
    }

    /// Mean over repeats of each repeat's CV-mean report.
    pub fn mean(&self, variant: &str) -> Option<MetricsReport> {
        let reports: Vec<MetricsReport> = self
            .tables
            .iter()
            .map(|t| t.rows.iter().find(|r| r.variant == variant).map(|r| r.report.mean.clone()))
            .collect::<Option<_>>()?;
        Some(mean_report(&reports))
    }

    pub fn check_order(&self, higher: &str, lower: &str) -> Option<OrderCheck> {
        let h = self.mean(higher)?.avg?;
        let l = self.mean(lower)?.avg?;
        Some(OrderCheck {
            expected_higher: higher.into(),
            expected_lower: lower.into(),
            higher_avg: h,
            lower_avg: l,
            reversed: h < l,
        })
    }

    /// With one repeat, identical to [`AblationTable::to_csv`]. Otherwise
    /// folds are labelled `r<repeat>.<fold>`, and a final `mean` row per
    /// variant averages the repeat means.
    pub fn to_csv(&self) -> String {
        if self.tables.len() == 1 {
            return self.tables[0].to_csv();
        }
        let mut out = String::from("variant,fold,sens,spec,acc,auc,avg\n");
        for name in self.variants() {
            for (r, table) in self.offsets.iter().zip(&self.tables) {
                let row = table.rows.iter().find(|row| row.variant == name).unwrap();
                for (i, f) in row.report.folds.iter().enumerate() {
                    csv_line(&mut out, name, &format!("r{r}.{i}"), f);
                }
                csv_line(&mut out, name, &format!("r{r}.mean"), &row.report.mean);
            }
            csv_line(&mut out, name, "mean", &self.mean(name).unwrap());
        }
        out
    }

    pub fn to_markdown(&self, config_hash: &str) -> String {
        let mut out = String::from("| Variant | Sens. | Spec. | Acc. | AUC | AVG |\n|---|---|---|---|---|---|\n");
        for name in self.variants() {
            let m = self.mean(name).unwrap();
            writeln!(
                out,
                "| {name} | {} | {} | {} | {} | {} |",
                pct(Some(m.sensitivity)),
                pct(Some(m.specificity)),
                pct(Some(m.accuracy)),
                pct(m.auc),
                pct(m.avg)
            )
            .unwrap();
        }
        if self.tables.len() > 1 {
            writeln!(out, "\nAVG per repeat:\n").unwrap();
            let header: Vec<String> = self.offsets.iter().map(|r| format!("r{r}")).collect();
            writeln!(out, "| Variant | {} |", header.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---|".repeat(header.len())).unwrap();
            for name in self.variants() {
                let cells: Vec<String> = self
                    .tables
                    .iter()
                    .map(|t| pct(t.mean_avg(name)))
                    .collect();
                writeln!(out, "| {name} | {} |", cells.join(" | ")).unwrap();
            }
        }
        if let Some(c) = self.check_order("+engine+emitter", "+coop") {
            let verdict = if c.reversed { "REVERSED" } else { "holds" };
            writeln!(
                out,
                "\norder check {} >= {}: {verdict} ({} vs {})",
                c.expected_higher,
                c.expected_lower,
                pct(Some(c.higher_avg)),
                pct(Some(c.lower_avg))
            )
            .unwrap();
        }
        writeln!(out, "\nconfig hash: `{config_hash}`").unwrap();
        out
    }
}
