//! Metrics, label mappings and zero-shot task adapters.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::data::{AbsaExample, NliExample, NliLabel, RteExample, RteLabel, Sentiment};
use crate::error::{Error, Result};
use crate::head::{NliPrediction, PairClassifier};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Rte,
    Sa,
    Tr,
    Absa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rte, Task::Sa, Task::Tr, Task::Absa];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Rte => "rte",
            Task::Sa => "sa",
            Task::Tr => "tr",
            Task::Absa => "absa",
        }
    }

    /// Positive class first.
    pub fn classes(self) -> [BinaryLabel; 2] {
        match self {
            Task::Rte => [BinaryLabel::Entailment, BinaryLabel::NoEntailment],
            _ => [BinaryLabel::Entailment, BinaryLabel::Contradiction],
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rte" => Ok(Task::Rte),
            "sa" => Ok(Task::Sa),
            "tr" => Ok(Task::Tr),
            "absa" => Ok(Task::Absa),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    Entailment,
    Contradiction,
    NoEntailment,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Entailment => "entailment",
            BinaryLabel::Contradiction => "contradiction",
            BinaryLabel::NoEntailment => "no-entailment",
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<RteLabel> for BinaryLabel {
    fn from(l: RteLabel) -> Self {
        match l {
            RteLabel::Entailment => BinaryLabel::Entailment,
            RteLabel::NoEntailment => BinaryLabel::NoEntailment,
        }
    }
}

/// How a three-way prediction collapses onto a task's two labels.
/// Entailment always maps to the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub task: Task,
    pub neutral_maps_to: BinaryLabel,
    pub contradiction_maps_to: BinaryLabel,
}

impl LabelMapping {
    /// The fixed mapping used for each task.
    pub fn for_task(task: Task) -> Self {
        let [positive, negative] = task.classes();
        let neutral_maps_to = match task {
            Task::Rte | Task::Absa => negative,
            Task::Sa | Task::Tr => positive,
        };
        Self {
            task,
            neutral_maps_to,
            contradiction_maps_to: negative,
        }
    }

    /// Both placements of Neutral, the fixed choice first.
    pub fn variants(task: Task) -> [Self; 2] {
        let fixed = Self::for_task(task);
        let [positive, negative] = task.classes();
        let other = if fixed.neutral_maps_to == positive {
            negative
        } else {
            positive
        };
        [
            fixed,
            Self {
                neutral_maps_to: other,
                ..fixed
            },
        ]
    }

    pub fn map(&self, label: NliLabel) -> BinaryLabel {
        match label {
            NliLabel::Entailment => BinaryLabel::Entailment,
            NliLabel::Neutral => self.neutral_maps_to,
            NliLabel::Contradiction => self.contradiction_maps_to,
        }
    }
}

/// Argmax label of `pred` passed through `mapping`.
pub fn map_prediction(pred: &NliPrediction, mapping: &LabelMapping) -> BinaryLabel {
    mapping.map(pred.predicted_label)
}

/// Fixed hypothesis for a zero-shot task. `target_topic` selects the
/// positive topic for topic and aspect tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisTemplate {
    pub task: Task,
    pub hypothesis_text: String,
    pub target_topic: Option<String>,
}

impl HypothesisTemplate {
    pub fn new(
        task: Task,
        hypothesis_text: impl Into<String>,
        target_topic: Option<String>,
    ) -> Result<Self> {
        let hypothesis_text = hypothesis_text.into();
        if hypothesis_text.trim().is_empty() {
            return Err(Error::Argument("empty hypothesis template".into()));
        }
        if matches!(task, Task::Tr | Task::Absa) && target_topic.is_none() {
            return Err(Error::Argument(format!(
                "{} template needs a target topic",
                task.as_str()
            )));
        }
        Ok(Self {
            task,
            hypothesis_text,
            target_topic,
        })
    }

    /// The Italian hypotheses used for the hotel-review tasks.
    pub fn default_for(task: Task) -> Option<Self> {
        let (text, topic) = match task {
            Task::Rte => return None,
            Task::Sa => ("Sono soddisfatto", None),
            Task::Tr => ("Parlo di pulizia", Some("cleanliness")),
            Task::Absa => ("La camera é pulita", Some("cleanliness")),
        };
        Some(Self {
            task,
            hypothesis_text: text.into(),
            target_topic: topic.map(Into::into),
        })
    }

    /// Binary gold label of a review under this template's task.
    pub fn gold(&self, ex: &AbsaExample) -> BinaryLabel {
        let on_topic = || self.target_topic.as_deref() == Some(ex.topic.as_str());
        let positive = match self.task {
            Task::Sa => ex.sentiment == Sentiment::Positive,
            Task::Tr => on_topic(),
            Task::Absa => on_topic() && ex.sentiment == Sentiment::Positive,
            Task::Rte => false,
        };
        let [pos, neg] = self.task.classes();
        if positive {
            pos
        } else {
            neg
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: String,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n: usize,
    pub accuracy: f64,
    pub per_class_f1: Vec<ClassF1>,
    pub min_f1: f64,
    pub macro_avg_f1: f64,
    /// Rows are gold classes, columns predicted classes, in `per_class_f1`
    /// order.
    pub confusion_matrix: Vec<Vec<u64>>,
}

/// Correctly rounded when numerator and denominator are below 2^53, which
/// holds for per-class F1 and accuracy on any realistic evaluation set.
fn ratio_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Accuracy, per-class F1 (`2TP / (2TP + FP + FN)`, 0 when undefined),
/// Min F1 and Macro-Avg F1, computed over exact fractions and rounded once.
pub fn evaluate<L>(predictions: &[L], golds: &[L], classes: &[L]) -> Result<EvalReport>
where
    L: Copy + PartialEq + fmt::Display,
{
    if predictions.len() != golds.len() {
        return Err(Error::data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() || classes.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let index = |l: &L| {
        classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::Label(format!("label {l} outside the class set")))
    };
    let k = classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, g) in predictions.iter().zip(golds) {
        confusion[index(g)?][index(p)?] += 1;
    }
    let n = golds.len();
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();

    let mut f1s = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c] as i128;
        let fp = (0..k)
            .filter(|&g| g != c)
            .map(|g| confusion[g][c])
            .sum::<u64>() as i128;
        let fn_ = (0..k)
            .filter(|&p| p != c)
            .map(|p| confusion[c][p])
            .sum::<u64>() as i128;
        let denom = 2 * tp + fp + fn_;
        f1s.push(if denom == 0 {
            Ratio::zero()
        } else {
            Ratio::new(2 * tp, denom)
        });
    }
    let min = f1s.iter().min().copied().expect("k >= 1");
    let macro_avg = f1s.iter().fold(Ratio::zero(), |a, b| a + b) / Ratio::from_integer(k as i128);

    Ok(EvalReport {
        task: String::new(),
        n,
        accuracy: ratio_f64(Ratio::new(correct as i128, n as i128)),
        per_class_f1: classes
            .iter()
            .zip(&f1s)
            .map(|(c, f)| ClassF1 {
                class: c.to_string(),
                f1: ratio_f64(*f),
            })
            .collect(),
        min_f1: ratio_f64(min),
        macro_avg_f1: ratio_f64(macro_avg),
        confusion_matrix: confusion,
    })
}

impl EvalReport {
    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "task": self.task,
            "n": self.n,
            "accuracy": self.accuracy,
            "min_f1": self.min_f1,
            "macro_f1": self.macro_avg_f1,
            "per_class_f1": self.per_class_f1,
        })
        .to_string()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("task: {}\nexamples: {}\n", self.task, self.n);
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy));
        out.push_str(&format!("min F1: {:.4}\n", self.min_f1));
        out.push_str(&format!("macro-avg F1: {:.4}\n", self.macro_avg_f1));
        out.push_str("per-class F1:\n");
        for c in &self.per_class_f1 {
            out.push_str(&format!("  {:<15} {:.4}\n", c.class, c.f1));
        }
        out.push_str("confusion (rows gold, columns predicted):\n");
        for row in &self.confusion_matrix {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            out.push_str(&format!("  {}\n", cells.join("")));
        }
        out
    }
}

pub fn predict_pairs<M: PairClassifier + ?Sized>(
    model: &M,
    pairs: &[(&str, &str)],
    exec: Execution,
) -> Result<Vec<NliPrediction>> {
    par::try_map(exec, pairs, |(p, h)| model.predict_pair(p, h))
}

/// Three-way evaluation on labelled NLI pairs.
pub fn evaluate_nli<M: PairClassifier + ?Sized>(
    model: &M,
    examples: &[NliExample],
    exec: Execution,
) -> Result<EvalReport> {
    let pairs: Vec<(&str, &str)> = examples
        .iter()
        .map(|e| (e.premise.as_str(), e.hypothesis.as_str()))
        .collect();
    let preds: Vec<NliLabel> = predict_pairs(model, &pairs, exec)?
        .iter()
        .map(|p| p.predicted_label)
        .collect();
    let golds: Vec<NliLabel> = examples.iter().map(|e| e.label).collect();
    Ok(evaluate(&preds, &golds, &NliLabel::ALL)?.with_task("nli"))
}

/// Two-way evaluation on RTE-style pairs through `mapping`.
pub fn evaluate_rte<M: PairClassifier + ?Sized>(
    model: &M,
    examples: &[RteExample],
    mapping: &LabelMapping,
    exec: Execution,
) -> Result<EvalReport> {
    let pairs: Vec<(&str, &str)> = examples
        .iter()
        .map(|e| (e.premise.as_str(), e.hypothesis.as_str()))
        .collect();
    let preds: Vec<BinaryLabel> = predict_pairs(model, &pairs, exec)?
        .iter()
        .map(|p| map_prediction(p, mapping))
        .collect();
    let golds: Vec<BinaryLabel> = examples.iter().map(|e| e.label.into()).collect();
    Ok(evaluate(&preds, &golds, &mapping.task.classes())?.with_task(mapping.task.as_str()))
}

/// Each review is the premise and the template the hypothesis; predictions
/// are mapped to the task's two labels and scored against the golds the
/// template derives from topic and sentiment.
pub fn zero_shot_task<M: PairClassifier + ?Sized>(
    model: &M,
    examples: &[AbsaExample],
    template: &HypothesisTemplate,
    mapping: &LabelMapping,
    exec: Execution,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::data("empty zero-shot dataset"));
    }
    if template.task != mapping.task {
        return Err(Error::Argument(
            "template and mapping are for different tasks".into(),
        ));
    }
    let hyp = template.hypothesis_text.as_str();
    let pairs: Vec<(&str, &str)> = examples.iter().map(|e| (e.text.as_str(), hyp)).collect();
    let preds: Vec<BinaryLabel> = predict_pairs(model, &pairs, exec)?
        .iter()
        .map(|p| map_prediction(p, mapping))
        .collect();
    let golds: Vec<BinaryLabel> = examples.iter().map(|e| template.gold(e)).collect();
    Ok(evaluate(&preds, &golds, &template.task.classes())?.with_task(template.task.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_table() {
        use BinaryLabel::*;
        let rte = LabelMapping::for_task(Task::Rte);
        assert_eq!(rte.map(NliLabel::Neutral), NoEntailment);
        assert_eq!(rte.map(NliLabel::Contradiction), NoEntailment);
        assert_eq!(
            LabelMapping::for_task(Task::Sa).map(NliLabel::Neutral),
            Entailment
        );
        assert_eq!(
            LabelMapping::for_task(Task::Tr).map(NliLabel::Neutral),
            Entailment
        );
        assert_eq!(
            LabelMapping::for_task(Task::Absa).map(NliLabel::Neutral),
            Contradiction
        );
        for t in Task::ALL {
            assert_eq!(
                LabelMapping::for_task(t).map(NliLabel::Entailment),
                Entailment
            );
            assert!(LabelMapping::variants(t).contains(&LabelMapping::for_task(t)));
        }
    }

    #[test]
    fn hand_computed_confusion() {
        // rows gold, columns predicted: [[5,1,0],[2,3,1],[0,0,8]]
        let cells = [[5, 1, 0], [2, 3, 1], [0, 0, 8]];
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for (g, row) in cells.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    golds.push(g);
                    preds.push(p);
                }
            }
        }
        let r = evaluate(&preds, &golds, &[0usize, 1, 2]).unwrap();
        // class 0: P = 5/7, R = 5/6 -> F1 = 10/13
        // class 1: P = 3/4, R = 3/6 -> F1 = 3/5
        // class 2: P = 8/9, R = 8/8 -> F1 = 16/17
        assert_eq!(r.per_class_f1[0].f1, 10.0 / 13.0);
        assert_eq!(r.per_class_f1[1].f1, 3.0 / 5.0);
        assert_eq!(r.per_class_f1[2].f1, 16.0 / 17.0);
        assert_eq!(r.min_f1, 0.6);
        assert!((r.macro_avg_f1 - (10.0 / 13.0 + 0.6 + 16.0 / 17.0) / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 16.0 / 20.0);
        assert_eq!(
            r.confusion_matrix,
            cells.iter().map(|r| r.to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn perfect_and_absent_classes() {
        let labels = [
            NliLabel::Entailment,
            NliLabel::Neutral,
            NliLabel::Contradiction,
        ];
        let r = evaluate(&labels, &labels, &NliLabel::ALL).unwrap();
        assert_eq!((r.accuracy, r.min_f1, r.macro_avg_f1), (1.0, 1.0, 1.0));

        let two = [NliLabel::Entailment, NliLabel::Neutral];
        let r = evaluate(&two, &two, &NliLabel::ALL).unwrap();
        assert_eq!(r.per_class_f1[2].f1, 0.0);
        assert_eq!(r.min_f1, 0.0);
        assert_eq!(r.macro_avg_f1, 2.0 / 3.0);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        assert!(matches!(
            evaluate(&[0usize], &[0, 1], &[0, 1]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            evaluate(&[2usize], &[0], &[0, 1]),
            Err(Error::Label(_))
        ));
        assert!(evaluate::<usize>(&[], &[], &[0]).is_err());
    }

    #[test]
    fn template_golds() {
        let ex = |topic: &str, s| AbsaExample {
            text: "x".into(),
            topic: topic.into(),
            sentiment: s,
            split: "test".into(),
        };
        let sa = HypothesisTemplate::default_for(Task::Sa).unwrap();
        let tr = HypothesisTemplate::default_for(Task::Tr).unwrap();
        let absa = HypothesisTemplate::default_for(Task::Absa).unwrap();
        assert_eq!(sa.hypothesis_text, "Sono soddisfatto");
        assert_eq!(
            sa.gold(&ex("wifi", Sentiment::Positive)),
            BinaryLabel::Entailment
        );
        assert_eq!(
            tr.gold(&ex("cleanliness", Sentiment::Negative)),
            BinaryLabel::Entailment
        );
        assert_eq!(
            tr.gold(&ex("wifi", Sentiment::Positive)),
            BinaryLabel::Contradiction
        );
        assert_eq!(
            absa.gold(&ex("cleanliness", Sentiment::Positive)),
            BinaryLabel::Entailment
        );
        assert_eq!(
            absa.gold(&ex("cleanliness", Sentiment::Negative)),
            BinaryLabel::Contradiction
        );
        assert!(HypothesisTemplate::default_for(Task::Rte).is_none());
        assert!(HypothesisTemplate::new(Task::Tr, "x", None).is_err());
        assert!(HypothesisTemplate::new(Task::Sa, " ", None).is_err());
    }

    #[test]
    fn report_serializations() {
        let r = evaluate(&[0usize, 1], &[0, 0], &[0, 1])
            .unwrap()
            .with_task("demo");
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["task"], "demo");
        assert_eq!(v["n"], 2);
        assert_eq!(v["per_class_f1"][0]["f1"], 2.0 / 3.0);
        assert!(r.to_text().contains("accuracy: 0.5000"));
    }
}
