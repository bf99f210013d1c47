//! Text normalisation, vocabulary, pretrained embeddings and conversion of
//! an [`Instance`] into encoder/decoder id sequences.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Instance;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ModelRng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CONN_OPEN: usize = 2;
pub const CONN_CLOSE: usize = 3;
pub const IMPL_CONN: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<conn>", "</conn>", "impl_conn"];

/// Punctuation that survives normalisation and is split into its own token.
const SPLIT_PUNCT: &[char] = &['.', ',', ';', ':', '?', '!', '"', '(', ')'];
/// Punctuation that survives normalisation and stays inside a token.
const WORD_PUNCT: &[char] = &['\'', '-', '%', '$', '&'];

/// Lowercase, drop characters outside the whitelist, and tokenise.
///
/// Kept: alphanumeric characters, [`SPLIT_PUNCT`] and [`WORD_PUNCT`].
/// Everything else (dashes, ellipses, symbols) is removed; any Unicode
/// whitespace separates tokens. `.` and `,` flanked by alphanumerics on both
/// sides stay inside the token (`3.5`, `1,000`); otherwise split punctuation
/// becomes a token of its own.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let chars: Vec<char> = lowered
        .chars()
        .filter(|c| {
            c.is_whitespace() || c.is_alphanumeric() || SPLIT_PUNCT.contains(c) || WORD_PUNCT.contains(c)
        })
        .collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if SPLIT_PUNCT.contains(&c) {
            let inner = (c == '.' || c == ',')
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if inner {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary from an id-ordered token list; the first five entries must
    /// be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Rebuild the lookup index after deserialisation.
    pub fn reindex(mut self) -> Result<Self> {
        let tokens = std::mem::take(&mut self.tokens);
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

fn instance_tokens(inst: &Instance) -> impl Iterator<Item = String> + '_ {
    normalize_text(&inst.arg1)
        .into_iter()
        .chain(normalize_text(&inst.arg2))
        .chain(inst.conn.iter().flat_map(|c| normalize_text(c)))
}

/// Tokens with frequency `>= min_count`, ordered by descending frequency
/// then lexicographically, after the five reserved tokens.
pub fn build_vocab(instances: &[Instance], min_count: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if instances.is_empty() {
        return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for inst in instances {
        for tok in instance_tokens(inst) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Embedding lookup with dropout applied to each looked-up row.
pub struct Embedder<'r> {
    pub table: Var,
    pub dropout: f64,
    pub training: bool,
    pub rng: &'r mut ModelRng,
}

impl Embedder<'_> {
    pub fn embed(&mut self, tape: &mut Tape<'_>, id: usize) -> Result<Var> {
        let row = tape.row(self.table, id)?;
        tape.dropout(row, self.dropout, self.training, self.rng)
    }

    pub fn embed_all(&mut self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Vec<Var>> {
        ids.iter().map(|&id| self.embed(tape, id)).collect()
    }
}

/// What [`load_embeddings`] found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingReport {
    /// Non-reserved vocabulary rows copied from the file.
    pub from_file: usize,
    /// Non-reserved vocabulary rows left at their random initialisation.
    pub random: usize,
}

/// Random `[|V|×dim]` embedding matrix, uniform in `[-range, range]`.
pub fn random_embeddings<R: Rng + ?Sized>(vocab: &Vocab, dim: usize, range: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(&[vocab.len(), dim], range, rng)
}

/// Overwrite rows of `matrix` from a word2vec text file
/// (`count dim` header, then `token v1 ... vd` per line).
pub fn load_embeddings(path: &Path, vocab: &Vocab, matrix: &mut Tensor) -> Result<EmbeddingReport> {
    let dim = matrix.cols();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            message: "empty embedding file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace();
    let parse_usize = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok());
    let (Some(_count), Some(file_dim), None) = (
        parse_usize(parts.next()),
        parse_usize(parts.next()),
        parts.next(),
    ) else {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected \"count dim\" header, got {header:?}"),
        });
    };
    if file_dim != dim {
        return Err(Error::Config(format!(
            "embedding file has dimension {file_dim}, model expects {dim}"
        )));
    }
    let mut seen = vec![false; vocab.len()];
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line");
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad value for {token:?}: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: lineno,
                message: format!("{token:?} has {} values, expected {dim}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("{token:?} has a non-finite value"),
            });
        }
        let Some(&id) = vocab.index.get(token) else {
            continue;
        };
        if id < RESERVED.len() || seen[id] {
            continue;
        }
        seen[id] = true;
        matrix.row_mut(id).copy_from_slice(&values);
    }
    let from_file = seen.iter().filter(|&&s| s).count();
    Ok(EmbeddingReport {
        from_file,
        random: vocab.len() - RESERVED.len() - from_file,
    })
}

/// An instance as encoder and decoder id sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    /// `[Arg1 ; Arg2]`.
    pub source_ids: Vec<usize>,
    /// `[Arg1 ; <conn> connective </conn> ; Arg2]`.
    pub target_ids: Vec<usize>,
    /// Positions of `<conn>` and `</conn>` in `target_ids`.
    pub conn_span: (usize, usize),
    pub label_ids: Vec<usize>,
}

impl EncodedInstance {
    pub fn arg1_len(&self) -> usize {
        self.conn_span.0
    }

    pub fn connective_ids(&self) -> &[usize] {
        &self.target_ids[self.conn_span.0 + 1..self.conn_span.1]
    }

    /// True when the connective region is the single `impl_conn` marker.
    pub fn has_placeholder(&self) -> bool {
        self.connective_ids() == [IMPL_CONN]
    }

    /// Same instance with the connective replaced by `impl_conn`.
    pub fn with_placeholder(&self) -> EncodedInstance {
        let a1 = self.arg1_len();
        let mut target = Vec::with_capacity(self.source_ids.len() + 3);
        target.extend_from_slice(&self.source_ids[..a1]);
        target.extend_from_slice(&[CONN_OPEN, IMPL_CONN, CONN_CLOSE]);
        target.extend_from_slice(&self.source_ids[a1..]);
        EncodedInstance {
            source_ids: self.source_ids.clone(),
            target_ids: target,
            conn_span: (a1, a1 + 2),
            label_ids: self.label_ids.clone(),
        }
    }
}

/// Build source and target sequences. Without a connective (or with one
/// that normalises to nothing) the placeholder form is produced.
pub fn encode_instance(inst: &Instance, vocab: &Vocab) -> Result<EncodedInstance> {
    let arg1 = vocab.encode(&normalize_text(&inst.arg1));
    let arg2 = vocab.encode(&normalize_text(&inst.arg2));
    if arg1.is_empty() || arg2.is_empty() {
        return Err(Error::Instance(format!(
            "instance {} has an empty argument after normalisation",
            inst.id
        )));
    }
    let conn = match &inst.conn {
        Some(c) => vocab.encode(&normalize_text(c)),
        None => Vec::new(),
    };
    let conn = if conn.is_empty() { vec![IMPL_CONN] } else { conn };

    let mut source = arg1.clone();
    source.extend_from_slice(&arg2);
    let mut target = Vec::with_capacity(source.len() + conn.len() + 2);
    target.extend_from_slice(&arg1);
    target.push(CONN_OPEN);
    target.extend_from_slice(&conn);
    target.push(CONN_CLOSE);
    target.extend_from_slice(&arg2);
    Ok(EncodedInstance {
        source_ids: source,
        conn_span: (arg1.len(), arg1.len() + conn.len() + 1),
        target_ids: target,
        label_ids: inst.label_ids.clone(),
    })
}

/// Encode a whole corpus, skipping (and counting) rejected instances.
pub fn encode_all(instances: &[Instance], vocab: &Vocab) -> (Vec<(usize, EncodedInstance)>, usize) {
    let mut out = Vec::with_capacity(instances.len());
    let mut skipped = 0;
    for (i, inst) in instances.iter().enumerate() {
        match encode_instance(inst, vocab) {
            Ok(e) => out.push((i, e)),
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::io::Write as _;

    fn inst(arg1: &str, arg2: &str, conn: Option<&str>) -> Instance {
        Instance {
            id: "t".into(),
            section: 0,
            arg1: arg1.into(),
            arg2: arg2.into(),
            conn: conn.map(str::to_string),
            relations: vec!["Expansion.Restatement".into()],
            label_ids: vec![8],
        }
    }

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn normalisation_examples() {
        assert_eq!(
            normalize_text("This is an OLD story."),
            toks(&["this", "is", "an", "old", "story", "."])
        );
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("A\u{00A0}\u{2014}B"), toks(&["a", "b"]));
        assert_eq!(normalize_text("We're at 3.5%, ok?"), toks(&["we're", "at", "3.5%", ",", "ok", "?"]));
        assert_eq!(normalize_text("years ago \u{2026}"), toks(&["years", "ago"]));
    }

    #[test]
    fn vocab_min_count_and_size() {
        let c = vec![inst("a a", "b", None)];
        let v = build_vocab(&c, 2).unwrap();
        assert!(v.contains("a") && !v.contains("b"));
        assert_eq!(v.id("b"), UNK);

        let c = vec![inst("x y", "z w", Some("q"))];
        assert_eq!(build_vocab(&c, 1).unwrap().len(), 5 + 5);
        assert!(matches!(build_vocab(&[], 1), Err(Error::Corpus(_))));
        assert!(matches!(build_vocab(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_is_deterministic_under_ties() {
        let c = vec![inst("d c b a", "e", None), inst("a", "b", None)];
        let v1 = build_vocab(&c, 1).unwrap();
        let v2 = build_vocab(&c, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(&v1.tokens()[5..], &toks(&["a", "b", "c", "d", "e"])[..]);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v1.token(i), *r);
        }
    }

    #[test]
    fn encodes_argument_pair_with_connective() {
        let i = inst(
            "This is an old story.",
            "We're talking about years ago \u{2026}",
            Some("in fact"),
        );
        let v = build_vocab(std::slice::from_ref(&i), 1).unwrap();
        let e = encode_instance(&i, &v).unwrap();
        let words = v.decode(&e.target_ids);
        let open = words.iter().position(|w| w == "<conn>").unwrap();
        assert_eq!(&words[open..open + 4], &toks(&["<conn>", "in", "fact", "</conn>"]));
        assert_eq!(open, 6);
        assert_eq!(e.conn_span, (6, 9));

        let test = inst("This is an old story.", "We're talking", None);
        let e = encode_instance(&test, &v).unwrap();
        assert!(e.has_placeholder());
        let words = v.decode(&e.target_ids);
        assert_eq!(&words[6..9], &toks(&["<conn>", "impl_conn", "</conn>"]));
    }

    #[test]
    fn one_token_everything_gives_length_five() {
        let i = inst("a", "b", Some("so"));
        let v = build_vocab(std::slice::from_ref(&i), 1).unwrap();
        let e = encode_instance(&i, &v).unwrap();
        assert_eq!(e.target_ids.len(), 5);
        assert_eq!(e.source_ids.len(), 2);
    }

    #[test]
    fn empty_argument_is_rejected() {
        let v = build_vocab(&[inst("a", "b", None)], 1).unwrap();
        assert!(matches!(
            encode_instance(&inst("\u{2014}", "b", None), &v),
            Err(Error::Instance(_))
        ));
        let (ok, skipped) = encode_all(&[inst("a", "b", None), inst("", "b", None)], &v);
        assert_eq!((ok.len(), skipped), (1, 1));
    }

    #[test]
    fn placeholder_conversion() {
        let i = inst("a b", "c", Some("in fact"));
        let v = build_vocab(std::slice::from_ref(&i), 1).unwrap();
        let e = encode_instance(&i, &v).unwrap();
        let p = e.with_placeholder();
        assert!(p.has_placeholder());
        assert_eq!(p.target_ids.len(), p.source_ids.len() + 3);
        assert_eq!(p.conn_span, (2, 4));
    }

    fn write_vectors(dim: usize, rows: &[(&str, Vec<f64>)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{} {dim}", rows.len()).unwrap();
        for (tok, vals) in rows {
            let vals: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{tok} {}", vals.join(" ")).unwrap();
        }
        f
    }

    #[test]
    fn embeddings_from_fixture_file() {
        let v = build_vocab(&[inst("cobbler shoe", "nail", None)], 1).unwrap();
        let f = write_vectors(
            3,
            &[
                ("cobbler", vec![0.1, 0.2, 0.3]),
                ("shoe", vec![-1.0, 0.5, 2.0]),
                ("nail", vec![0.0, 0.0, 1e-3]),
            ],
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = random_embeddings(&v, 3, 0.1, &mut rng);
        let report = load_embeddings(f.path(), &v, &mut m).unwrap();
        assert_eq!(report, EmbeddingReport { from_file: 3, random: 0 });
        assert_eq!(m.row(v.id("cobbler")), &[0.1, 0.2, 0.3]);
        assert_eq!(m.row(v.id("shoe")), &[-1.0, 0.5, 2.0]);
    }

    #[test]
    fn embedding_errors() {
        let v = build_vocab(&[inst("a", "b", None)], 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = random_embeddings(&v, 100, 0.1, &mut rng);
        let f = write_vectors(50, &[("a", vec![0.0; 50])]);
        assert!(matches!(load_embeddings(f.path(), &v, &mut m), Err(Error::Config(_))));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 2\na 0.1 0.2\nb 0.1 oops").unwrap();
        let mut m = random_embeddings(&v, 2, 0.1, &mut rng);
        assert!(matches!(
            load_embeddings(f.path(), &v, &mut m),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn encoded_lengths_hold(
            a1 in prop::collection::vec("[a-e]{1,3}", 1..8),
            a2 in prop::collection::vec("[a-e]{1,3}", 1..8),
            conn in prop::option::of(prop::collection::vec("[f-h]{1,2}", 1..3)),
        ) {
            let i = inst(&a1.join(" "), &a2.join(" "), conn.as_ref().map(|c| c.join(" ")).as_deref());
            let v = build_vocab(std::slice::from_ref(&i), 1).unwrap();
            let e = encode_instance(&i, &v).unwrap();
            let conn_len = conn.as_ref().map_or(1, |c| c.len());
            prop_assert_eq!(e.target_ids.len(), e.source_ids.len() + conn_len + 2);
            prop_assert!(e.conn_span.0 >= 1 && e.conn_span.0 == a1.len());
            prop_assert!(e.conn_span.1 < e.target_ids.len() - 1 + 1);
            prop_assert_eq!(e.target_ids[e.conn_span.0], CONN_OPEN);
            prop_assert_eq!(e.target_ids[e.conn_span.1], CONN_CLOSE);
        }

        #[test]
        fn decode_inverts_encode_up_to_unk(words in prop::collection::vec("[a-z]{1,4}", 1..20), min_count in 1usize..3) {
            let text = words.join(" ");
            let v = build_vocab(&[inst(&text, "x", None)], min_count).unwrap();
            let toks = normalize_text(&text);
            let back = v.decode(&v.encode(&toks));
            for (orig, got) in toks.iter().zip(&back) {
                prop_assert!(got == orig || got == "<unk>");
            }
        }

        #[test]
        fn normalisation_never_emits_reserved(s in "\\PC{0,40}") {
            for t in normalize_text(&s) {
                prop_assert!(!RESERVED.contains(&t.as_str()));
            }
        }
    }
}
