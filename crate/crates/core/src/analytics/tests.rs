use super::*;
use crate::textdist::{levenshtein, similarity};
use proptest::prelude::*;

fn verdict(name: &str, label: Label, predicted: bool) -> PackageVerdict {
    PackageVerdict {
        package: name.into(),
        matched_rules: BTreeSet::new(),
        matched_count: 0,
        predicted,
        label,
    }
}

fn table(tp: usize, fp: usize, tn: usize, fn_: usize) -> Vec<PackageVerdict> {
    let mut v = Vec::new();
    let mut push = |n: usize, label, predicted| {
        for _ in 0..n {
            let name = format!("p{}", v.len());
            v.push(verdict(&name, label, predicted));
        }
    };
    push(tp, Label::Malicious, true);
    push(fp, Label::Legitimate, true);
    push(tn, Label::Legitimate, false);
    push(fn_, Label::Malicious, false);
    v
}

#[test]
fn hand_computed_metrics() {
    let m = confusion_metrics(&table(2, 1, 6, 1)).unwrap();
    assert_eq!((m.tp, m.fp, m.tn, m.fn_), (2, 1, 6, 1));
    assert!((m.accuracy - 0.8).abs() < 1e-12);
    assert!((m.precision.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.percent_row(), ["80.0", "66.7", "66.7", "66.7"]);
}

#[test]
fn all_correct() {
    let m = confusion_metrics(&table(3, 0, 4, 0)).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.f1, Some(1.0));
}

#[test]
fn zero_positive_predictions_are_null() {
    let m = confusion_metrics(&table(0, 0, 5, 2)).unwrap();
    assert_eq!(m.precision, None);
    assert_eq!(m.f1, None);
    assert_eq!(m.recall, Some(0.0));
    assert_eq!(m.percent_row()[1], "null");
    let json = serde_json::to_value(m).unwrap();
    assert!(json["precision"].is_null());
    assert_eq!(json["fn"], 2);
}

#[test]
fn empty_and_unlabeled() {
    assert!(matches!(
        confusion_metrics(&[]),
        Err(AnalyticsError::EmptyInput)
    ));
    let v = [verdict("x", Label::Unknown, true)];
    assert!(matches!(
        confusion_metrics(&v),
        Err(AnalyticsError::Unlabeled(_))
    ));
}

fn tally(id: &str, mal: &[&str], legit: &[&str]) -> RuleTally {
    RuleTally {
        rule_id: id.into(),
        format: None,
        malicious: mal.iter().map(|s| s.to_string()).collect(),
        legitimate: legit.iter().map(|s| s.to_string()).collect(),
        unlabeled: BTreeSet::new(),
    }
}

fn fixture_tallies() -> Vec<RuleTally> {
    vec![
        tally("a", &["m1"], &[]),
        tally("b", &["m1", "m2", "m3"], &["l1"]),
        tally("c", &[], &[]),
        tally("d", &["m2"], &["l1"]),
        tally("e", &["m1", "m2", "m3", "m4"], &[]),
        tally("f", &[], &["l2"]),
    ]
}

#[test]
fn precision_histogram() {
    let rep = per_rule_precision(&fixture_tallies());
    assert_eq!(rep.unmatched, ["c"]);
    let p: Vec<(&str, Option<f64>)> = rep
        .rules
        .iter()
        .map(|r| (r.rule_id.as_str(), r.precision))
        .collect();
    assert_eq!(
        p,
        [
            ("a", Some(1.0)),
            ("b", Some(0.75)),
            ("d", Some(0.5)),
            ("e", Some(1.0)),
            ("f", Some(0.0))
        ]
    );
    let counts: Vec<usize> = rep.histogram.iter().map(|b| b.rules).collect();
    assert_eq!(counts, [1, 0, 0, 0, 0, 1, 0, 1, 0, 2]);
}

#[test]
fn coverage_golden() {
    let counts = coverage_counts(&fixture_tallies());
    assert_eq!(counts, [1, 3, 0, 1, 4, 0]);
    let csv = cdf_csv(&coverage_cdf(&counts), "detected_packages").unwrap();
    assert_eq!(
        csv,
        "detected_packages,cumulative_fraction\n0,0.333333\n1,0.666667\n3,0.833333\n4,1.000000\n"
    );
}

#[test]
fn coverage_edge_cases() {
    assert_eq!(coverage_cdf(&[1, 1, 1]), [CdfPoint { x: 1.0, y: 1.0 }]);
    assert!(coverage_cdf(&[]).is_empty());
}

fn tags(cats: &[&str]) -> BTreeSet<TaxonomyTag> {
    cats.iter()
        .map(|c| TaxonomyTag {
            category: c.to_string(),
            subcategory: "s".into(),
        })
        .collect()
}

#[test]
fn heatmap_golden() {
    let cats = ["A", "B", "C"];
    let sets = [
        tags(&["A", "B"]),
        tags(&["A"]),
        tags(&["B", "C"]),
        tags(&["A", "B", "C"]),
    ];
    let h = category_heatmap(&sets, &cats);
    assert_eq!(h.matrix, [vec![3, 2, 1], vec![2, 3, 2], vec![1, 2, 2]]);
    assert_eq!(
        h.to_csv().unwrap(),
        "category,A,B,C\nA,3,2,1\nB,2,3,2\nC,1,2,2\n"
    );
}

#[test]
fn heatmap_edge_cases() {
    let cats = ["A", "B"];
    let single = category_heatmap(&[tags(&["A"]), tags(&["B"]), tags(&["B"])], &cats);
    assert_eq!(single.matrix, [vec![1, 0], vec![0, 2]]);
    let empty = category_heatmap(&[], &cats);
    assert_eq!(empty.matrix, [vec![0, 0], vec![0, 0]]);
    let t = Taxonomy::default();
    assert_eq!(category_heatmap(&[], &t.category_names()).matrix.len(), 11);
}

fn scored_rule(m: Option<f64>, r: Option<f64>, c: Option<f64>) -> Rule {
    let mut rule = crate::validator::compile_yara(
        "rule r {\n meta:\n  a = 1\n strings:\n  $a = \"x\"\n condition:\n  $a\n}\n",
    )
    .unwrap();
    rule.scores.maliciousness = m;
    rule.scores.risk = r;
    rule.scores.confidence = c;
    rule
}

#[test]
fn score_cdfs() {
    let rules = [
        scored_rule(Some(0.9), None, Some(1.0)),
        scored_rule(Some(0.5), Some(0.2), Some(1.0)),
        scored_rule(None, None, Some(1.0)),
    ];
    let s = score_cdf(&rules);
    assert_eq!(s.confidence, [CdfPoint { x: 1.0, y: 1.0 }]);
    assert_eq!(
        s.maliciousness,
        [CdfPoint { x: 0.5, y: 0.5 }, CdfPoint { x: 0.9, y: 1.0 }]
    );
    assert_eq!(
        (
            s.missing_maliciousness,
            s.missing_risk,
            s.missing_confidence
        ),
        (1, 2, 0)
    );
    let none = score_cdf(&[scored_rule(None, None, None)]);
    assert!(none.risk.is_empty());
    assert_eq!(none.missing_risk, 1);
}

#[test]
fn subcategory_table_counts_every_tag() {
    let t = Taxonomy::default();
    let sets = vec![
        t.classify_text("os.system(base64.b64decode(x))"),
        t.classify_text("nothing here"),
    ];
    let rows = subcategory_counts(&sets, &t);
    assert_eq!(rows.len(), 38);
    let total: usize = rows.iter().map(|(_, n)| n).sum();
    assert!(total >= sets.len());
    assert!(subcategory_csv(&rows)
        .unwrap()
        .starts_with("category,subcategory,rules\nMetadata Related,"));
}

/// Textbook recursion with memoisation over char indices.
fn dp_oracle(a: &[char], b: &[char]) -> usize {
    let mut memo = vec![vec![usize::MAX; b.len() + 1]; a.len() + 1];
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<usize>>) -> usize {
        if memo[i][j] != usize::MAX {
            return memo[i][j];
        }
        let d = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            (go(a, b, i - 1, j, memo) + 1)
                .min(go(a, b, i, j - 1, memo) + 1)
                .min(go(a, b, i - 1, j - 1, memo) + cost)
        };
        memo[i][j] = d;
        d
    }
    go(a, b, a.len(), b.len(), &mut memo)
}

proptest! {
    #[test]
    fn levenshtein_equals_dp_oracle(a in "[abcé ]{0,12}", b in "[abcé ]{0,12}") {
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        prop_assert_eq!(levenshtein(&a, &b), dp_oracle(&ac, &bc));
        let s = similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn metrics_ignore_order(counts in (0usize..8, 0usize..8, 0usize..8, 0usize..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (tp, fp, tn, fn_) = counts;
        prop_assume!(tp + fp + tn + fn_ > 0);
        let mut v = table(tp, fp, tn, fn_);
        let a = confusion_metrics(&v).unwrap();
        v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = confusion_metrics(&v).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.total() as usize, v.len());
    }

    #[test]
    fn heatmap_symmetric_with_dominant_diagonal(
        sets in proptest::collection::vec(proptest::collection::btree_set(0usize..5, 0..4), 0..20)
    ) {
        let cats = ["A", "B", "C", "D", "E"];
        let tag_sets: Vec<BTreeSet<TaxonomyTag>> = sets
            .iter()
            .map(|s| s.iter().map(|&i| TaxonomyTag { category: cats[i].into(), subcategory: "s".into() }).collect())
            .collect();
        let h = category_heatmap(&tag_sets, &cats);
        for i in 0..5 {
            for j in 0..5 {
                prop_assert_eq!(h.matrix[i][j], h.matrix[j][i]);
                prop_assert!(h.matrix[i][i] >= h.matrix[i][j]);
            }
        }
    }
}
