//! Class vocabularies, prompt templates and per-class text embeddings.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, BackendResult, TextEncoder};
use crate::embeddings::{l2_normalize, Embedding, UnitEmbedding};
use crate::error::{Error, Result};

/// Placeholder replaced by the class name in a template.
pub const PLACEHOLDER: &str = "{}";

/// Default agricultural templates.
pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "There is {} in the scene",
    "A clear image of {}",
    "A photo of a {}",
];

/// Ordered, non-empty list of unique class names.
///
/// Names are stored trimmed; uniqueness is checked after trimming and case-folding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidVocabulary("vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let trimmed = name.trim();
            if trimmed.is_empty() {
                return Err(Error::InvalidVocabulary("empty class name".into()));
            }
            if !seen.insert(trimmed.to_lowercase()) {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate class name {trimmed:?}"
                )));
            }
            out.push(trimmed.to_string());
        }
        Ok(Self { names: out })
    }

    /// Parse a comma-separated list such as `"tomato, pepper,eggplant"`.
    pub fn from_comma_list(list: &str) -> Result<Self> {
        let names: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Self::new(names)
    }

    /// One class per non-blank line; `#` lines are comments.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(content_lines(text).map(String::from).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = name.trim().to_lowercase();
        self.names.iter().position(|n| n.to_lowercase() == key)
    }
}

impl TryFrom<Vec<String>> for ClassVocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassVocabulary> for Vec<String> {
    fn from(v: ClassVocabulary) -> Self {
        v.names
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Ordered prompt templates, each containing [`PLACEHOLDER`] exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        for t in &templates {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::InvalidTemplate {
                    template: t.clone(),
                    reason: format!("expected exactly one `{PLACEHOLDER}`, found {n}"),
                });
            }
        }
        Ok(Self { templates })
    }

    /// Template file: one template per line, `#` lines ignored, UTF-8.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(content_lines(text).map(String::from).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn render(&self, class_name: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(PLACEHOLDER, class_name, 1))
            .collect()
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for PromptSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PromptSet> for Vec<String> {
    fn from(p: PromptSet) -> Self {
        p.templates
    }
}

/// How several template encodings combine into one class embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptEnsemble {
    /// Component-wise mean of all template encodings, then re-normalized.
    #[default]
    Mean,
    /// Only the first template is encoded.
    FirstOnly,
}

/// For each class, every template with the class name substituted.
pub fn render_prompts(vocab: &ClassVocabulary, prompts: &PromptSet) -> Vec<Vec<String>> {
    vocab.names().iter().map(|n| prompts.render(n)).collect()
}

/// Per-class text embeddings using `encoder`.
pub fn class_embeddings(
    vocab: &ClassVocabulary,
    prompts: &PromptSet,
    encoder: &dyn TextEncoder,
    ensemble: PromptEnsemble,
) -> Result<Vec<UnitEmbedding>> {
    class_embeddings_with(vocab, prompts, ensemble, |p| encoder.encode(p))
}

/// Same as [`class_embeddings`] with an arbitrary encode function.
pub fn class_embeddings_with<F>(
    vocab: &ClassVocabulary,
    prompts: &PromptSet,
    ensemble: PromptEnsemble,
    encode: F,
) -> Result<Vec<UnitEmbedding>>
where
    F: Fn(&str) -> BackendResult<Embedding>,
{
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt templates"));
    }
    let rendered = render_prompts(vocab, prompts);
    let mut out = Vec::with_capacity(vocab.len());
    for (name, class_prompts) in vocab.names().iter().zip(rendered) {
        let used = match ensemble {
            PromptEnsemble::Mean => &class_prompts[..],
            PromptEnsemble::FirstOnly => &class_prompts[..1],
        };
        let mut sum: Option<Vec<f64>> = None;
        for prompt in used {
            let e = encode(prompt).map_err(|err| {
                Error::Backend(BackendError::new(
                    err.backend,
                    format!("prompt {prompt:?}: {}", err.message),
                ))
            })?;
            match sum.as_mut() {
                None => sum = Some(e.into_inner()),
                Some(acc) => {
                    if acc.len() != e.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: acc.len(),
                            actual: e.dim(),
                        });
                    }
                    acc.iter_mut().zip(e.as_slice()).for_each(|(a, b)| *a += b);
                }
            }
        }
        let n = used.len() as f64;
        let mean: Vec<f64> = sum.unwrap_or_default().into_iter().map(|c| c / n).collect();
        let unit = l2_normalize(&Embedding::new(mean)?).map_err(|_| {
            Error::DegenerateEmbedding(format!("template ensemble for class {name:?} has zero norm"))
        })?;
        out.push(unit);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stubs::HashTextEncoder;
    use std::collections::HashMap;

    fn vocab(names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn vocabulary_validation() {
        assert!(ClassVocabulary::new(vec![]).is_err());
        assert!(ClassVocabulary::new(vec!["  ".into()]).is_err());
        assert!(ClassVocabulary::new(vec!["Tomato".into(), " tomato ".into()]).is_err());
        let v = ClassVocabulary::from_comma_list(" kiwi, lemon ,").unwrap();
        assert_eq!(v.names(), &["kiwi", "lemon"]);
        assert_eq!(v.index_of("LEMON"), Some(1));
        assert!(ClassVocabulary::from_comma_list(",,").is_err());
    }

    #[test]
    fn template_needs_one_placeholder() {
        assert!(PromptSet::new(vec!["no slot".into()]).is_err());
        assert!(PromptSet::new(vec!["{} and {}".into()]).is_err());
        let p = PromptSet::from_text("# header\nA photo of a {}\n\n  # indented comment\nThe {}\n").unwrap();
        assert_eq!(p.templates(), &["A photo of a {}", "The {}"]);
    }

    #[test]
    fn render_examples() {
        assert_eq!(
            render_prompts(&vocab(&["tomato"]), &PromptSet::default()),
            vec![vec![
                "There is tomato in the scene".to_string(),
                "A clear image of tomato".to_string(),
                "A photo of a tomato".to_string(),
            ]]
        );
        let empty = PromptSet::new(vec![]).unwrap();
        assert_eq!(render_prompts(&vocab(&["a", "b"]), &empty), vec![Vec::<String>::new(); 2]);
        let one = PromptSet::new(vec!["A photo of a {}".into()]).unwrap();
        assert_eq!(
            render_prompts(&vocab(&["kiwi", "lemon"]), &one),
            vec![vec!["A photo of a kiwi".to_string()], vec!["A photo of a lemon".to_string()]]
        );
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> HashMap<String, Vec<f64>> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn lookup(t: &HashMap<String, Vec<f64>>) -> impl Fn(&str) -> BackendResult<Embedding> + '_ {
        move |p| {
            t.get(p)
                .map(|v| Embedding::new(v.clone()).unwrap())
                .ok_or_else(|| BackendError::new("table", format!("unknown prompt {p}")))
        }
    }

    #[test]
    fn single_template_is_identity() {
        let t = table(&[("x kiwi", vec![0.6, 0.8, 0.0])]);
        let p = PromptSet::new(vec!["x {}".into()]).unwrap();
        let e = class_embeddings_with(&vocab(&["kiwi"]), &p, PromptEnsemble::Mean, lookup(&t)).unwrap();
        assert_eq!(e[0].as_slice(), &[0.6, 0.8, 0.0]);
    }

    #[test]
    fn cancelling_templates_fail() {
        let t = table(&[("a kiwi", vec![1.0, 2.0]), ("b kiwi", vec![-1.0, -2.0])]);
        let p = PromptSet::new(vec!["a {}".into(), "b {}".into()]).unwrap();
        let r = class_embeddings_with(&vocab(&["kiwi"]), &p, PromptEnsemble::Mean, lookup(&t));
        assert!(matches!(r, Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn three_template_average() {
        let e1 = vec![1.0, 0.0, 2.0];
        let e2 = vec![0.0, 3.0, 1.0];
        let e3 = vec![1.0, 1.0, 0.0];
        let t = table(&[("a k", e1), ("b k", e2), ("c k", e3)]);
        let p = PromptSet::new(vec!["a {}".into(), "b {}".into(), "c {}".into()]).unwrap();
        let e = class_embeddings_with(&vocab(&["k"]), &p, PromptEnsemble::Mean, lookup(&t)).unwrap();
        // mean (2/3, 4/3, 1); norm sqrt(4/9 + 16/9 + 1) = sqrt(29)/3
        let n = 29f64.sqrt();
        let expect = [2.0 / n, 4.0 / n, 3.0 / n];
        for (a, b) in e[0].as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let first = class_embeddings_with(&vocab(&["k"]), &p, PromptEnsemble::FirstOnly, lookup(&t)).unwrap();
        let n = 5f64.sqrt();
        assert!((first[0].as_slice()[2] - 2.0 / n).abs() < 1e-15);
    }

    #[test]
    fn encoder_failure_names_prompt() {
        let t = table(&[]);
        let err = class_embeddings_with(&vocab(&["kiwi"]), &PromptSet::default(), PromptEnsemble::Mean, lookup(&t))
            .unwrap_err();
        assert!(err.to_string().contains("There is kiwi in the scene"));
    }

    #[test]
    fn hash_encoder_embeddings_are_unit_and_ordered() {
        let enc = HashTextEncoder::new(1, 512);
        let v = vocab(&["tomato", "pepper", "eggplant"]);
        let e = class_embeddings(&v, &PromptSet::default(), &enc, PromptEnsemble::Mean).unwrap();
        assert_eq!(e.len(), 3);
        for x in &e {
            let n: f64 = x.as_slice().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let rev = vocab(&["eggplant", "pepper", "tomato"]);
        let er = class_embeddings(&rev, &PromptSet::default(), &enc, PromptEnsemble::Mean).unwrap();
        assert_eq!(er[0], e[2]);
        assert_eq!(er[2], e[0]);
    }

    #[test]
    fn empty_prompt_set_rejected() {
        let enc = HashTextEncoder::new(1, 8);
        let r = class_embeddings(&vocab(&["a"]), &PromptSet::new(vec![]).unwrap(), &enc, PromptEnsemble::Mean);
        assert!(r.is_err());
    }
}
