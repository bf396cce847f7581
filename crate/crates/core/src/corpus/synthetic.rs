//! Template-based C-like functions with exactly one injected bug each.
//!
//! Every function is rendered twice in lockstep: the correct text becomes
//! `fixed_code`, the text with the injected bug becomes `vulnerable_code`,
//! and the bug site's character range in the latter becomes the span.

use super::SampleRecord;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BugClass {
    /// `i < n` loop bound weakened to `i <= n`.
    OffByOne,
    /// Bounds-check comparison reversed.
    SwappedComparison,
    /// Null guard before a dereference removed.
    MissingNullCheck,
    /// Copy length no longer matches the destination's declared size.
    WrongBufferLength,
}

impl BugClass {
    pub const ALL: [BugClass; 4] = [
        BugClass::OffByOne,
        BugClass::SwappedComparison,
        BugClass::MissingNullCheck,
        BugClass::WrongBufferLength,
    ];

    pub fn cwe_id(self) -> &'static str {
        match self {
            BugClass::OffByOne => "CWE-193",
            BugClass::SwappedComparison => "CWE-697",
            BugClass::MissingNullCheck => "CWE-476",
            BugClass::WrongBufferLength => "CWE-131",
        }
    }
}

const VERBS: &[&str] = &["copy", "parse", "read", "fill", "scan", "load", "pack", "hash", "check", "sum"];
const NOUNS: &[&str] = &["buffer", "packet", "header", "record", "frame", "block", "message", "entry"];
const BUFS: &[&str] = &["buf", "data", "dst", "out", "payload", "tmp"];
const SRCS: &[&str] = &["src", "input", "msg", "raw", "bytes"];
const LENS: &[&str] = &["len", "n", "count", "size", "total"];
const IDXS: &[&str] = &["i", "j", "k", "idx", "pos"];
const PTRS: &[&str] = &["ctx", "req", "node", "hdr", "dev"];
const FIELDS: &[&str] = &["len", "flags", "state", "used", "next"];
const CAPS: &[&str] = &["MAX_LEN", "BUF_CAP", "LIMIT", "MAX_SIZE"];
const ACCS: &[&str] = &["acc", "sum", "ret", "h"];
const SIZES: &[usize] = &[8, 16, 32, 64, 128, 256];
const COMMENTS: &[&str] = &["// validate input", "// copy payload", "/* fast path */", "// TODO: audit"];

/// Names shared by all statements of one function.
struct Names {
    func: String,
    buf: &'static str,
    src: &'static str,
    len: &'static str,
    idx: &'static str,
    ptr: &'static str,
    field: &'static str,
    cap: &'static str,
    acc: &'static str,
    size: usize,
}

impl Names {
    fn draw(rng: &mut Rng) -> Self {
        let len = *rng.choose(LENS);
        let field = loop {
            let f = *rng.choose(FIELDS);
            if f != len {
                break f;
            }
        };
        Names {
            func: format!("{}_{}", rng.choose(VERBS), rng.choose(NOUNS)),
            buf: rng.choose(BUFS),
            src: rng.choose(SRCS),
            len,
            idx: rng.choose(IDXS),
            ptr: rng.choose(PTRS),
            field,
            cap: rng.choose(CAPS),
            acc: rng.choose(ACCS),
            size: *rng.choose(SIZES),
        }
    }
}

/// Appends to the fixed and vulnerable renderings in lockstep.
struct PairWriter {
    fixed: String,
    vulnerable: String,
    span: Option<(usize, usize)>,
}

impl PairWriter {
    fn both(&mut self, s: &str) {
        self.fixed.push_str(s);
        self.vulnerable.push_str(s);
    }

    /// `fixed` goes to the fixed text, `buggy` to the vulnerable text, and the
    /// latter's character range is recorded as the span.
    fn site(&mut self, fixed: &str, buggy: &str) {
        let start = self.vulnerable.chars().count();
        self.fixed.push_str(fixed);
        self.vulnerable.push_str(buggy);
        self.span = Some((start, self.vulnerable.chars().count()));
    }
}

fn render(class: BugClass, rng: &mut Rng) -> (String, String, usize, usize) {
    let nm = Names::draw(rng);
    let mut w = PairWriter {
        fixed: String::new(),
        vulnerable: String::new(),
        span: None,
    };

    let mut hosts = vec![class];
    for other in BugClass::ALL {
        if other != class && rng.uniform() < 0.5 {
            hosts.push(other);
        }
    }
    // Statement order is fixed so the surrounding context stays code-like.
    hosts.sort_by_key(|c| BugClass::ALL.iter().position(|x| x == c));

    if rng.uniform() < 0.2 {
        w.both("/* generated helper */\n");
    }
    w.both(&format!("int {}(struct item *{}, const char *{}, int {}) {{\n", nm.func, nm.ptr, nm.src, nm.len));
    w.both(&format!("    char {}[{}];\n", nm.buf, nm.size));
    w.both(&format!("    int {} = 0;\n", nm.acc));

    for host in hosts {
        if rng.uniform() < 0.15 {
            w.both(&format!("    {}\n", rng.choose(COMMENTS)));
        }
        let buggy = host == class;
        match host {
            BugClass::SwappedComparison => {
                let (good, bad) = *rng.choose(&[(">", "<"), (">=", "<=")]);
                w.both("    if (");
                let fixed = format!("{} {good} {}", nm.len, nm.cap);
                if buggy {
                    w.site(&fixed, &format!("{} {bad} {}", nm.len, nm.cap));
                } else {
                    w.both(&fixed);
                }
                w.both(") {\n        return -1;\n    }\n");
            }
            BugClass::MissingNullCheck => {
                w.both("    ");
                let deref = format!("{}->{} = {};", nm.ptr, nm.field, nm.len);
                let guarded = format!("if (!{}) return -1;\n    {deref}", nm.ptr);
                if buggy {
                    w.site(&guarded, &deref);
                } else {
                    w.both(&guarded);
                }
                w.both("\n");
            }
            BugClass::WrongBufferLength => {
                let call = *rng.choose(&["memcpy", "strncpy"]);
                let wrong = loop {
                    let s = *rng.choose(SIZES);
                    if s != nm.size {
                        break s;
                    }
                };
                w.both("    ");
                let fixed = format!("{call}({}, {}, {});", nm.buf, nm.src, nm.size);
                if buggy {
                    w.site(&fixed, &format!("{call}({}, {}, {wrong});", nm.buf, nm.src));
                } else {
                    w.both(&fixed);
                }
                w.both("\n");
            }
            BugClass::OffByOne => {
                let i = nm.idx;
                w.both(&format!("    for (int {i} = 0; "));
                let fixed = format!("{i} < {}", nm.len);
                if buggy {
                    w.site(&fixed, &format!("{i} <= {}", nm.len));
                } else {
                    w.both(&fixed);
                }
                w.both(&format!("; {i}++) {{\n        {} += {}[{i}];\n    }}\n", nm.acc, nm.src));
            }
        }
    }
    w.both(&format!("    return {};\n}}\n", nm.acc));
    let (start, end) = w.span.expect("bug site rendered");
    (w.fixed, w.vulnerable, start, end)
}

/// `count` records; record `i` depends only on `(seed, i)`, so a shorter run
/// is a prefix of a longer one.
pub fn gen_synthetic(count: usize, seed: u64) -> Vec<SampleRecord> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let class = BugClass::ALL[rng.below(BugClass::ALL.len())];
            let (fixed, vulnerable, start, end) = render(class, &mut rng);
            SampleRecord {
                id: format!("syn-{seed}-{i:06}"),
                vulnerable_code: vulnerable,
                fixed_code: fixed,
                cwe_id: class.cwe_id().to_string(),
                vuln_start: start,
                vuln_end: end,
            }
        })
        .collect()
}
