//! Scores printed in published robustness tables, for arithmetic checks.
//!
//! Rows are labelled `dataset/kind/model`. Scores are percentages.

use crate::perturb::PerturbationKind;

use super::{pdr, recovery};

/// One model's clean/perturbed scores and printed drop rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedPdr {
    pub dataset: &'static str,
    pub kind: PerturbationKind,
    pub model: &'static str,
    /// clean, perturbed, printed PDR
    pub ic: [f64; 3],
    /// clean, perturbed, printed PDR; absent for zero-shot rows
    pub sf: Option<[f64; 3]>,
}

impl PublishedPdr {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.kind, self.model)
    }
}

fn kind(name: &str) -> PerturbationKind {
    name.parse().expect("known kind")
}

fn row(
    dataset: &'static str,
    k: &str,
    model: &'static str,
    ic: [f64; 3],
    sf: [Option<f64>; 3],
) -> PublishedPdr {
    let sf = match sf {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        _ => None,
    };
    PublishedPdr {
        dataset,
        kind: kind(k),
        model,
        ic,
        sf,
    }
}

/// MASSIVE, ATIS and SNIPS drop-rate rows.
pub fn pdr_rows() -> Vec<PublishedPdr> {
    vec![
    row("massive", "oronym", "JointBERT", [90.19, 70.77, 21.53], [Some(80.50), Some(42.28), Some(47.47)]),
    row("massive", "oronym", "JointBERT+CRF", [89.50, 71.19, 20.45], [Some(80.65), Some(42.41), Some(47.41)]),
    row("massive", "oronym", "GPT3.5-ZS", [61.39, 60.69, 1.15], [None, None, None]),
    row("massive", "oronym", "GPT3.5-FS", [70.43, 48.91, 30.55], [Some(31.95), Some(20.75), Some(35.05)]),
    row("massive", "oronym", "GPT2+SFT", [85.52, 67.71, 20.83], [Some(65.14), Some(27.51), Some(58.40)]),
    row("massive", "oronym", "LLaMA-7b+SFT", [89.18, 74.31, 16.67], [Some(79.35), Some(47.01), Some(40.75)]),
    row("massive", "synonym", "JointBERT", [90.43, 78.29, 13.42], [Some(80.83), Some(74.77), Some(7.49)]),
    row("massive", "synonym", "JointBERT+CRF", [89.43, 77.61, 13.21], [Some(81.86), Some(75.87), Some(7.31)]),
    row("massive", "synonym", "GPT3.5-ZS", [63.04, 58.66, 6.95], [None, None, None]),
    row("massive", "synonym", "GPT3.5-FS", [65.54, 54.59, 16.71], [Some(34.43), Some(31.57), Some(8.30)]),
    row("massive", "synonym", "GPT2+SFT", [84.99, 70.42, 17.14], [Some(67.92), Some(60.62), Some(10.74)]),
    row("massive", "synonym", "LLaMA-7b+SFT", [89.23, 76.79, 13.94], [Some(80.75), Some(72.90), Some(9.72)]),
    row("massive", "paraphrase", "JointBERT", [89.30, 82.96, 7.09], [Some(82.81), Some(71.67), Some(13.45)]),
    row("massive", "paraphrase", "JointBERT+CRF", [88.71, 80.88, 8.82], [Some(82.64), Some(70.08), Some(15.19)]),
    row("massive", "paraphrase", "GPT3.5-ZS", [60.80, 55.27, 9.09], [None, None, None]),
    row("massive", "paraphrase", "GPT3.5-FS", [65.55, 59.08, 9.88], [Some(34.87), Some(29.22), Some(16.20)]),
    row("massive", "paraphrase", "GPT2+SFT", [82.60, 76.71, 7.13], [Some(63.53), Some(52.33), Some(17.63)]),
    row("massive", "paraphrase", "LLaMA-7b+SFT", [82.78, 80.21, 8.62], [Some(81.58), Some(68.41), Some(16.14)]),
    row("atis", "oronym", "JointBERT", [97.87, 96.11, 1.79], [Some(96.47), Some(78.37), Some(18.76)]),
    row("atis", "oronym", "JointBERT+CRF", [97.17, 95.75, 1.46], [Some(96.00), Some(76.09), Some(20.74)]),
    row("atis", "oronym", "GPT3.5-ZS", [87.80, 86.21, 1.81], [None, None, None]),
    row("atis", "oronym", "GPT3.5-FS", [91.54, 90.28, 1.37], [Some(77.89), Some(51.42), Some(33.98)]),
    row("atis", "oronym", "GPT2+SFT", [98.58, 96.28, 2.33], [Some(59.75), Some(43.49), Some(27.21)]),
    row("atis", "oronym", "LLaMA-7b+SFT", [99.11, 97.17, 1.95], [Some(94.24), Some(76.68), Some(18.63)]),
    row("atis", "synonym", "JointBERT", [97.91, 91.96, 6.07], [Some(93.18), Some(92.64), Some(3.68)]),
    row("atis", "synonym", "JointBERT+CRF", [97.32, 89.28, 8.26], [Some(96.28), Some(92.46), Some(3.96)]),
    row("atis", "synonym", "GPT3.5-ZS", [82.44, 76.48, 7.22], [None, None, None]),
    row("atis", "synonym", "GPT3.5-FS", [89.58, 88.09, 1.66], [Some(77.50), Some(73.08), Some(5.70)]),
    row("atis", "synonym", "GPT2+SFT", [97.32, 92.56, 4.89], [Some(60.17), Some(53.00), Some(11.91)]),
    row("atis", "synonym", "LLaMA-7b+SFT", [98.21, 91.36, 6.97], [Some(94.73), Some(89.33), Some(5.70)]),
    row("atis", "paraphrase", "JointBERT", [97.60, 91.00, 6.76], [Some(95.86), Some(82.64), Some(13.79)]),
    row("atis", "paraphrase", "JointBERT+CRF", [98.81, 90.20, 8.71], [Some(95.61), Some(82.43), Some(13.78)]),
    row("atis", "paraphrase", "GPT3.5-ZS", [88.15, 82.33, 6.71], [None, None, None]),
    row("atis", "paraphrase", "GPT3.5-FS", [90.20, 87.12, 3.41], [Some(77.50), Some(70.01), Some(9.66)]),
    row("atis", "paraphrase", "GPT2+SFT", [92.12, 90.19, 2.09], [Some(92.96), Some(44.76), Some(51.85)]),
    row("atis", "paraphrase", "LLaMA-7b+SFT", [98.17, 90.42, 7.89], [Some(93.72), Some(80.63), Some(13.97)]),
    row("snips", "oronym", "JointBERT", [98.61, 96.06, 2.58], [Some(97.05), Some(79.14), Some(18.45)]),
    row("snips", "oronym", "JointBERT+CRF", [98.14, 94.67, 3.53], [Some(95.87), Some(78.63), Some(17.98)]),
    row("snips", "oronym", "GPT3.5-ZS", [95.60, 94.44, 1.21], [None, None, None]),
    row("snips", "oronym", "GPT3.5-FS", [93.98, 90.74, 3.44], [Some(50.30), Some(41.48), Some(17.53)]),
    row("snips", "oronym", "GPT2+SFT", [97.86, 95.26, 2.65], [Some(90.66), Some(65.24), Some(28.04)]),
    row("snips", "oronym", "LLaMA-7b+SFT", [98.14, 96.75, 1.42], [Some(94.42), Some(75.84), Some(19.67)]),
    row("snips", "synonym", "JointBERT", [99.05, 95.58, 3.50], [Some(96.00), Some(87.04), Some(9.33)]),
    row("snips", "synonym", "JointBERT+CRF", [99.05, 95.58, 3.50], [Some(94.87), Some(86.68), Some(8.63)]),
    row("snips", "synonym", "GPT3.5-ZS", [95.89, 84.85, 11.51], [None, None, None]),
    row("snips", "synonym", "GPT3.5-FS", [94.32, 80.44, 14.71], [Some(48.05), Some(43.28), Some(9.92)]),
    row("snips", "synonym", "GPT2+SFT", [98.71, 90.06, 8.76], [Some(90.85), Some(75.41), Some(16.99)]),
    row("snips", "synonym", "LLaMA-7b+SFT", [99.05, 94.32, 4.77], [Some(94.45), Some(83.25), Some(11.85)]),
    row("snips", "paraphrase", "JointBERT", [98.53, 93.09, 5.52], [Some(96.67), Some(58.69), Some(39.39)]),
    row("snips", "paraphrase", "JointBERT+CRF", [98.23, 91.77, 6.57], [Some(96.06), Some(58.88), Some(38.70)]),
    row("snips", "paraphrase", "GPT3.5-ZS", [95.74, 83.84, 12.42], [None, None, None]),
    row("snips", "paraphrase", "GPT3.5-FS", [93.97, 80.76, 14.05], [Some(49.49), Some(33.01), Some(33.29)]),
    row("snips", "paraphrase", "GPT2+SFT", [97.60, 90.09, 7.69], [Some(90.96), Some(49.44), Some(45.64)]),
    row("snips", "paraphrase", "LLaMA-7b+SFT", [98.23, 90.01, 8.36], [Some(94.41), Some(55.64), Some(41.06)]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ic,
    Sf,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ic => "IC",
            Metric::Sf => "SF",
        }
    }
}

/// A mitigation row: baseline and mitigated PDR with the printed recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedRecovery {
    pub kind: PerturbationKind,
    pub metric: Metric,
    pub baseline_pdr: f64,
    pub mitigated_pdr: f64,
    pub printed_recovery: f64,
}

/// Consistency-learning rows on MASSIVE (LLaMA-7b).
pub fn ppcl_recoveries() -> Vec<PublishedRecovery> {
    let r = |k: &str, metric, baseline_pdr, mitigated_pdr, printed_recovery| PublishedRecovery {
        kind: kind(k),
        metric,
        baseline_pdr,
        mitigated_pdr,
        printed_recovery,
    };
    vec![
        r("oronym", Metric::Ic, 16.67, 8.74, 47.0),
        r("oronym", Metric::Sf, 40.75, 15.41, 62.0),
        r("synonym", Metric::Ic, 13.94, 3.74, 73.0),
        r("synonym", Metric::Sf, 9.72, 1.44, 85.0),
        r("paraphrase", Metric::Ic, 8.62, 3.69, 57.0),
        r("paraphrase", Metric::Sf, 16.14, 6.36, 60.0),
    ]
}

/// Headline averages over the three perturbation kinds.
pub const MEAN_IC_PDR: f64 = 13.07;
pub const MEAN_SF_PDR: f64 = 22.20;
pub const MEAN_IC_RECOVERY: f64 = 59.0;
pub const MEAN_SF_RECOVERY: f64 = 69.0;

/// Model whose drop rates the headline averages summarise.
pub const HEADLINE_MODEL: &str = "LLaMA-7b+SFT";

/// One reproduced number against its printed value.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLine {
    pub label: String,
    pub printed: f64,
    pub computed: f64,
    pub tolerance: f64,
}

impl OracleLine {
    pub fn pass(&self) -> bool {
        (self.printed - self.computed).abs() <= self.tolerance + 1e-9
    }

    pub fn render(&self) -> String {
        format!(
            "{} {}: computed {:.4}, printed {:.2} (tol {})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.label,
            self.computed,
            self.printed,
            self.tolerance
        )
    }
}

/// Every printed PDR cell recomputed from its own clean/perturbed scores.
pub fn pdr_oracle() -> Vec<OracleLine> {
    let mut out = Vec::new();
    for r in pdr_rows() {
        let cells = [(Metric::Ic, Some(r.ic)), (Metric::Sf, r.sf)];
        for (metric, cell) in cells {
            if let Some([clean, pert, printed]) = cell {
                out.push(OracleLine {
                    label: format!("{}/{}", r.label(), metric.as_str()),
                    printed,
                    computed: pdr(clean, pert).expect("published clean scores are positive"),
                    tolerance: 0.01,
                });
            }
        }
    }
    out
}

/// Means of the headline model's printed MASSIVE drop rates.
pub fn aggregation_oracle() -> Vec<OracleLine> {
    let rows: Vec<PublishedPdr> = pdr_rows()
        .into_iter()
        .filter(|r| r.dataset == "massive" && r.model == HEADLINE_MODEL)
        .collect();
    let mean = |f: &dyn Fn(&PublishedPdr) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    vec![
        OracleLine {
            label: "massive/mean-over-kinds/IC-PDR".into(),
            printed: MEAN_IC_PDR,
            computed: mean(&|r| r.ic[2]),
            tolerance: 0.01,
        },
        OracleLine {
            label: "massive/mean-over-kinds/SF-PDR".into(),
            printed: MEAN_SF_PDR,
            computed: mean(&|r| r.sf.expect("headline rows have SF")[2]),
            tolerance: 0.01,
        },
    ]
}

/// Consistency-learning recoveries and their per-metric means.
pub fn recovery_oracle() -> Vec<OracleLine> {
    let rows = ppcl_recoveries();
    let mut out: Vec<OracleLine> = rows
        .iter()
        .map(|r| OracleLine {
            label: format!("massive/{}/ppcl/{}-recovery", r.kind, r.metric.as_str()),
            printed: r.printed_recovery,
            computed: recovery(r.baseline_pdr, r.mitigated_pdr).expect("non-zero baseline"),
            tolerance: 1.0,
        })
        .collect();
    for (metric, printed) in [(Metric::Ic, MEAN_IC_RECOVERY), (Metric::Sf, MEAN_SF_RECOVERY)] {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| recovery(r.baseline_pdr, r.mitigated_pdr).expect("non-zero baseline"))
            .collect();
        out.push(OracleLine {
            label: format!("massive/mean-over-kinds/ppcl/{}-recovery", metric.as_str()),
            printed,
            computed: vals.iter().sum::<f64>() / vals.len() as f64,
            tolerance: 1.0,
        });
    }
    out
}
