//! Caption guidance: prompt rendering, MLLM client contract, response
//! parsing, the JSON-lines caption cache and conversion of captions into
//! reference embeddings.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataio::{array_to_rgb, AVClip};
use crate::encoders::{ReferenceEmbeddings, TextEncoder};
use crate::error::{Error, Result};

pub const TEMPLATE_ID: &str = "fg-bg-scenes-v1";
pub const CAPTION_PREFIX: &str = "an image of";
pub const ENDPOINT_ENV: &str = "AVSL_MLLM_ENDPOINT";
pub const TOKEN_ENV: &str = "AVSL_MLLM_TOKEN";
pub const FIXTURE_MODEL: &str = "fixture";

const HEADER: &str = "Analyze the provided image along with its associated class label, which identifies an object or element in the image that emits sound. The scene is complex, containing multiple objects, and requiring categorization based on the examples below.

Instructions:
1. Identify foreground (sound-related) elements: These are objects in the image emitting sounds that match the class description.
2. Identify background (sound-unrelated) elements: These are distinct objects visible in the image but unrelated to the sound described by the class.
3. Focus strictly on what is visible in the image. Do not infer or describe unseen objects.

Output Format:
The response must always be in JSON format with structured sentences that start with 'an image of....'. If there are two or more class labels (separated by commas), the foreground must be provided as a list of sound-making elements.

Examples:";

const FOOTER: &str = "Now, process the provided input following the same structure and RETURN ONLY the JSON FORMAT.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub title: String,
    pub image: String,
    pub class_label: String,
    pub output: String,
}

fn default_examples() -> Vec<FewShotExample> {
    let ex = |title: &str, image: &str, label: &str, output: &str| FewShotExample {
        title: title.into(),
        image: image.into(),
        class_label: label.into(),
        output: output.into(),
    };
    vec![
        ex(
            "(1) Scenario with multiple objects, including a sound-making one",
            "example_image_1",
            "man_blowing_whistle",
            "{\n    \"foreground\": \"an image of a man blowing a whistle\",\n    \"background\": \"an image of mountains, desert landscape, and sky\"\n}",
        ),
        ex(
            "(2) Scenario with visually similar objects, distinguishing sound-making ones",
            "example_image_2",
            "acoustic_guitar",
            "{\n    \"foreground\": \"an image of a man playing guitar\",\n    \"background\": \"an image of non-playing guitars, drum-set, and amp\"\n}",
        ),
        ex(
            "(3) Scenario with multiple sound-making elements",
            "example_image_3",
            "clarinet, violin",
            "{\n    \"foreground\": [\"an image of playing clarinet\", \"an image of playing violin\"],\n    \"background\": \"an image of the kitchen, curtains, and piano in the background\"\n}",
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template_id: String,
    pub class_labels: Vec<String>,
    pub few_shot_examples: Vec<FewShotExample>,
}

impl PromptSpec {
    pub fn new(labels: &[String]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("prompt needs at least one class label".into()));
        }
        if labels.iter().any(|l| l.trim().is_empty()) {
            return Err(Error::Validation("empty class label".into()));
        }
        Ok(Self {
            template_id: TEMPLATE_ID.into(),
            class_labels: labels.to_vec(),
            few_shot_examples: default_examples(),
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        for ex in &self.few_shot_examples {
            out.push_str(&format!(
                "\n{}\nInput:\n- image: {}\n- class label: {}\n\nOutput:\n{}\n",
                ex.title, ex.image, ex.class_label, ex.output
            ));
        }
        out.push_str(FOOTER);
        out.push_str(&format!(
            "\n\nInput:\n- image: provided image\n- class label: {}\n",
            self.class_labels.join(", ")
        ));
        out
    }
}

pub fn build_prompt(labels: &[String]) -> Result<String> {
    Ok(PromptSpec::new(labels)?.render())
}

/// Short hash of the template with a placeholder label; any edit to the
/// template text changes it.
pub fn prompt_version() -> String {
    let spec = PromptSpec {
        template_id: TEMPLATE_ID.into(),
        class_labels: vec!["{labels}".into()],
        few_shot_examples: default_examples(),
    };
    let digest = Sha256::digest(format!("{TEMPLATE_ID}\n{}", spec.render()).as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Mllm,
    Fixture,
    Cache,
}

/// Foreground and background captions as parsed from one response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub foreground: Vec<String>,
    pub background: String,
}

impl CaptionPair {
    pub fn to_json(&self) -> String {
        serde_json::json!({"foreground": self.foreground, "background": self.background}).to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceCaptions {
    pub clip_id: String,
    pub class_labels: Vec<String>,
    pub foreground: Vec<String>,
    pub background: String,
    pub source: CaptionSource,
    pub prompt_version: String,
}

impl GuidanceCaptions {
    pub fn k(&self) -> usize {
        self.foreground.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.foreground.is_empty() {
            return Err(Error::Validation(format!("{}: no foreground captions", self.clip_id)));
        }
        for c in self.foreground.iter().chain(std::iter::once(&self.background)) {
            if !c.to_lowercase().starts_with(CAPTION_PREFIX) || c.len() <= CAPTION_PREFIX.len() {
                return Err(Error::Validation(format!("{}: malformed caption {c:?}", self.clip_id)));
            }
        }
        Ok(())
    }
}

/// Collapses whitespace and adds the "an image of" prefix when missing.
pub fn normalize_caption(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.to_lowercase().starts_with(CAPTION_PREFIX) {
        collapsed
    } else {
        format!("{CAPTION_PREFIX} {collapsed}")
    }
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(120).collect()
}

/// First balanced `{...}` in the text, skipping braces inside strings.
fn first_json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, ch) in raw[start..].char_indices() {
        if in_str {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_response(raw: &str, expected_k: usize) -> Result<CaptionPair> {
    let parse_err = |reason: &str| Error::Parse {
        reason: reason.into(),
        excerpt: excerpt(raw),
    };
    let obj = first_json_object(raw).ok_or_else(|| parse_err("no JSON object found"))?;
    let value: Value = serde_json::from_str(obj).map_err(|e| parse_err(&format!("invalid JSON: {e}")))?;
    let foreground: Vec<String> = match value.get("foreground") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect::<Option<_>>()
            .ok_or_else(|| parse_err("foreground list must contain strings"))?,
        Some(_) => return Err(parse_err("foreground must be a string or a list")),
        None => return Err(parse_err("missing \"foreground\"")),
    };
    let background = value
        .get("background")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("missing or non-string \"background\""))?;
    if foreground.iter().chain(std::iter::once(&background.to_owned())).any(|c| c.trim().is_empty()) {
        return Err(parse_err("empty caption"));
    }
    if foreground.len() != expected_k {
        return Err(Error::SourceCountMismatch {
            expected: expected_k,
            got: foreground.len(),
        });
    }
    Ok(CaptionPair {
        foreground: foreground.iter().map(|c| normalize_caption(c)).collect(),
        background: normalize_caption(background),
    })
}

/// Remote multimodal model: image plus prompt in, raw text out.
pub trait CaptionClient {
    fn model(&self) -> &str;
    fn generate(&self, clip: &AVClip, prompt: &str) -> Result<String>;
}

#[derive(Clone, Debug)]
pub struct HttpCaptionClient {
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl HttpCaptionClient {
    pub fn from_env(model: &str, timeout: Duration) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(Self {
            endpoint,
            model: model.into(),
            token: std::env::var(TOKEN_ENV).ok(),
            timeout,
        })
    }
}

#[derive(Deserialize)]
struct ClientResponse {
    text: String,
}

impl CaptionClient for HttpCaptionClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn generate(&self, clip: &AVClip, prompt: &str) -> Result<String> {
        let mut png = Vec::new();
        array_to_rgb(clip.image.view())
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| Error::Client(format!("encoding {}: {e}", clip.clip_id)))?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(&png),
            "prompt": prompt,
            "model": self.model,
        });
        let mut req = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let resp: ClientResponse = req
            .send_json(body)
            .map_err(|e| Error::Client(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Client(format!("bad response body: {e}")))?;
        Ok(resp.text)
    }
}

/// Captions derived from the synthetic ground truth.
pub fn fixture_captions(clip: &AVClip) -> CaptionPair {
    let foreground = clip
        .class_labels
        .iter()
        .map(|c| format!("{CAPTION_PREFIX} a sounding {c}"))
        .collect();
    let background = match clip.silent_objects.as_slice() {
        [] => format!("{CAPTION_PREFIX} a plain background"),
        objs => {
            let parts: Vec<String> = objs.iter().map(|o| format!("a silent {o}")).collect();
            format!("{CAPTION_PREFIX} {}", parts.join(" and "))
        }
    };
    CaptionPair {
        foreground,
        background,
    }
}

pub enum Provider<'a> {
    Fixture,
    Client(&'a dyn CaptionClient),
}

impl Provider<'_> {
    pub fn model(&self) -> &str {
        match self {
            Provider::Fixture => FIXTURE_MODEL,
            Provider::Client(c) => c.model(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub clip_id: String,
    pub class_labels: Vec<String>,
    pub foreground: Vec<String>,
    pub background: String,
    pub model: String,
    pub prompt_version: String,
    pub timestamp: u64,
}

/// Append-only JSON-lines cache with an in-memory index keyed by
/// (clip id, prompt version, model). A later line for the same key wins.
#[derive(Debug)]
pub struct CaptionCache {
    path: PathBuf,
    index: HashMap<(String, String, String), CacheRecord>,
}

impl CaptionCache {
    pub fn open(path: &Path) -> Result<Self> {
        let mut index = HashMap::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (no, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    reason: format!("cache line {}: {e}", no + 1),
                    excerpt: excerpt(&line),
                })?;
                index.insert(Self::key(&rec.clip_id, &rec.prompt_version, &rec.model), rec);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            index,
        })
    }

    fn key(clip_id: &str, version: &str, model: &str) -> (String, String, String) {
        (clip_id.into(), version.into(), model.into())
    }

    pub fn get(&self, clip_id: &str, model: &str) -> Option<&CacheRecord> {
        self.index.get(&Self::key(clip_id, &prompt_version(), model))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: CacheRecord) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&self.path, e))?;
        self.index.insert(Self::key(&rec.clip_id, &rec.prompt_version, &rec.model), rec);
        Ok(())
    }
}

pub const MAX_ATTEMPTS: usize = 3;

/// Cached captions for the clip, generating and appending them on a miss.
/// Client responses that fail to parse or carry the wrong number of
/// sources are retried up to [`MAX_ATTEMPTS`] times; the last error is
/// returned so the caller can flag the clip.
pub fn get_or_generate(clip: &AVClip, provider: &Provider, cache: &mut CaptionCache) -> Result<GuidanceCaptions> {
    let version = prompt_version();
    if let Some(rec) = cache.get(&clip.clip_id, provider.model()) {
        return Ok(GuidanceCaptions {
            clip_id: rec.clip_id.clone(),
            class_labels: rec.class_labels.clone(),
            foreground: rec.foreground.clone(),
            background: rec.background.clone(),
            source: CaptionSource::Cache,
            prompt_version: version,
        });
    }
    let (pair, source) = match provider {
        Provider::Fixture => (fixture_captions(clip), CaptionSource::Fixture),
        Provider::Client(client) => {
            let prompt = build_prompt(&clip.class_labels)?;
            let mut last = None;
            let mut parsed = None;
            for attempt in 1..=MAX_ATTEMPTS {
                match client.generate(clip, &prompt).and_then(|raw| parse_response(&raw, clip.k)) {
                    Ok(p) => {
                        parsed = Some(p);
                        break;
                    }
                    Err(e) => {
                        log::warn!("clip {}: caption attempt {attempt} failed: {e}", clip.clip_id);
                        last = Some(e);
                    }
                }
            }
            match parsed {
                Some(p) => (p, CaptionSource::Mllm),
                None => return Err(last.expect("at least one attempt")),
            }
        }
    };
    let captions = GuidanceCaptions {
        clip_id: clip.clip_id.clone(),
        class_labels: clip.class_labels.clone(),
        foreground: pair.foreground,
        background: pair.background,
        source,
        prompt_version: version.clone(),
    };
    captions.validate()?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    cache.append(CacheRecord {
        clip_id: captions.clip_id.clone(),
        class_labels: captions.class_labels.clone(),
        foreground: captions.foreground.clone(),
        background: captions.background.clone(),
        model: provider.model().into(),
        prompt_version: version,
        timestamp,
    })?;
    Ok(captions)
}

/// Encodes a batch of captions. Clips with fewer foreground captions than
/// the largest K in the batch repeat their last caption.
pub fn to_reference_embeddings(captions: &[GuidanceCaptions], encoder: &dyn TextEncoder) -> Result<ReferenceEmbeddings> {
    if captions.is_empty() {
        return Err(Error::Validation("empty caption batch".into()));
    }
    let k = captions.iter().map(GuidanceCaptions::k).max().unwrap_or(0);
    if k == 0 {
        return Err(Error::Validation("captions without foreground".into()));
    }
    if captions.iter().any(|c| c.k() != k) {
        log::warn!("ragged K in caption batch; padding to {k} by repeating the last caption");
    }
    let mut fg_text = Vec::with_capacity(captions.len() * k);
    for c in captions {
        for i in 0..k {
            fg_text.push(c.foreground.get(i).or(c.foreground.last()).cloned().unwrap_or_default());
        }
    }
    let bg_text: Vec<String> = captions.iter().map(|c| c.background.clone()).collect();
    let fg = encoder.encode(&fg_text)?;
    let bg: Array2<f64> = encoder.encode(&bg_text)?;
    let dim = encoder.dim();
    let fg = Array3::from_shape_vec((captions.len(), k, dim), fg.iter().cloned().collect())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    ReferenceEmbeddings::new(fg, bg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::encoders::FixtureTextEncoder;
    use crate::sim::cos;
    use std::cell::Cell;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_rendering() {
        let single = build_prompt(&labels(&["acoustic_guitar"])).unwrap();
        assert!(single.starts_with("Analyze the provided image"));
        assert!(single.contains("- class label: acoustic_guitar\n"));
        assert!(single.contains("\"foreground\": \"an image of a man playing guitar\""));
        let duo = build_prompt(&labels(&["clarinet", "violin"])).unwrap();
        assert!(duo.contains("the foreground must be provided as a list"));
        assert!(duo.ends_with("- class label: clarinet, violin\n"));
        assert_eq!(duo, build_prompt(&labels(&["clarinet", "violin"])).unwrap());
        assert!(build_prompt(&[]).unwrap_err().is_validation());
        assert_eq!(prompt_version(), prompt_version());
        assert_eq!(prompt_version().len(), 12);
    }

    #[test]
    fn parse_examples() {
        let p = parse_response(
            r#"{"foreground":"an image of a man playing guitar","background":"an image of non-playing guitars, drum-set, and amp"}"#,
            1,
        )
        .unwrap();
        assert_eq!(p.foreground, vec!["an image of a man playing guitar"]);
        assert_eq!(p.background, "an image of non-playing guitars, drum-set, and amp");

        let raw = r#"{"foreground":["an image of playing clarinet","an image of playing violin"],"background":"an image of the kitchen, curtains, and piano in the background"}"#;
        let p = parse_response(raw, 2).unwrap();
        assert_eq!(p.foreground, vec!["an image of playing clarinet", "an image of playing violin"]);
        let fenced = format!("Sure!\n```json\n{raw}\n```\n");
        assert_eq!(parse_response(&fenced, 2).unwrap(), p);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_response("not json", 1), Err(Error::Parse { .. })));
        assert!(matches!(parse_response("{\"foreground\": \"an image of x\"", 1), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_response(r#"{"foreground":"an image of x"}"#, 1),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_response(r#"{"foreground":"an image of x","background":"an image of y"}"#, 2),
            Err(Error::SourceCountMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn parse_normalizes() {
        let p = parse_response(r#"{"foreground":"  a  drum {kit} ","background":"An image of\nwalls"}"#, 1).unwrap();
        assert_eq!(p.foreground, vec!["an image of a drum {kit}"]);
        assert_eq!(p.background, "An image of walls");
        assert_eq!(parse_response(&p.to_json(), 1).unwrap(), p);
    }

    struct Scripted {
        replies: Vec<String>,
        calls: Cell<usize>,
    }

    impl CaptionClient for Scripted {
        fn model(&self) -> &str {
            "scripted"
        }
        fn generate(&self, _: &AVClip, _: &str) -> Result<String> {
            let i = self.calls.get();
            self.calls.set(i + 1);
            Ok(self.replies[i.min(self.replies.len() - 1)].clone())
        }
    }

    fn clip(duet: bool) -> AVClip {
        let spec = SyntheticSpec {
            n_clips: 1,
            duet,
            ..Default::default()
        };
        generate_synthetic(&spec).unwrap().remove(0)
    }

    #[test]
    fn cache_hits_skip_client() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let mut cache = CaptionCache::open(&path).unwrap();
        let c = clip(false);
        let label = &c.class_labels[0];
        let client = Scripted {
            replies: vec![format!(r#"{{"foreground":"an image of a {label}","background":"an image of sky"}}"#)],
            calls: Cell::new(0),
        };
        let first = get_or_generate(&c, &Provider::Client(&client), &mut cache).unwrap();
        assert_eq!(first.source, CaptionSource::Mllm);
        let second = get_or_generate(&c, &Provider::Client(&client), &mut cache).unwrap();
        assert_eq!(client.calls.get(), 1);
        assert_eq!(second.source, CaptionSource::Cache);
        assert_eq!(second.foreground, first.foreground);

        let reopened = CaptionCache::open(&path).unwrap();
        assert_eq!(reopened.get(&c.clip_id, "scripted"), cache.get(&c.clip_id, "scripted"));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn retries_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = CaptionCache::open(&dir.path().join("c.jsonl")).unwrap();
        let c = clip(true);
        let client = Scripted {
            replies: vec![r#"{"foreground":"an image of one","background":"an image of sky"}"#.into()],
            calls: Cell::new(0),
        };
        let err = get_or_generate(&c, &Provider::Client(&client), &mut cache).unwrap_err();
        assert!(matches!(err, Error::SourceCountMismatch { expected: 2, got: 1 }));
        assert_eq!(client.calls.get(), MAX_ATTEMPTS);
        assert!(cache.is_empty());

        let client = Scripted {
            replies: vec![
                "garbage".into(),
                r#"{"foreground":["an image of x","an image of y"],"background":"an image of z"}"#.into(),
            ],
            calls: Cell::new(0),
        };
        assert!(get_or_generate(&c, &Provider::Client(&client), &mut cache).is_ok());
        assert_eq!(client.calls.get(), 2);
    }

    #[test]
    fn fixture_rule() {
        let mut c = clip(false);
        c.class_labels = labels(&["circle"]);
        c.silent_objects = labels(&["square"]);
        let p = fixture_captions(&c);
        assert_eq!(p.foreground, vec!["an image of a sounding circle"]);
        assert_eq!(p.background, "an image of a silent square");
        c.silent_objects.clear();
        assert_eq!(fixture_captions(&c).background, "an image of a plain background");
    }

    #[test]
    fn fixture_classes_are_not_false_negatives() {
        let enc = FixtureTextEncoder::new(16, 7);
        let caps: Vec<String> = ["circle", "square", "triangle"]
            .iter()
            .map(|c| format!("{CAPTION_PREFIX} a sounding {c}"))
            .collect();
        let e = enc.encode(&caps).unwrap();
        for i in 0..3 {
            for j in 0..i {
                assert!(e.row(i).dot(&e.row(j)) < crate::losses::OcaConfig::default().tau);
            }
        }
    }

    fn gc(fg: &[&str]) -> GuidanceCaptions {
        GuidanceCaptions {
            clip_id: "x".into(),
            class_labels: vec![],
            foreground: labels(fg),
            background: "an image of the kitchen".into(),
            source: CaptionSource::Fixture,
            prompt_version: prompt_version(),
        }
    }

    #[test]
    fn reference_embeddings() {
        let enc = FixtureTextEncoder::new(16, 7);
        let r = to_reference_embeddings(&[gc(&["an image of a dog"])], &enc).unwrap();
        assert_eq!(r.foreground.dim(), (1, 1, 16));
        assert_eq!(r.background.dim(), (1, 16));

        let r = to_reference_embeddings(&[gc(&["an image of playing clarinet", "an image of playing violin"])], &enc).unwrap();
        let a = r.foreground.slice(ndarray::s![0, 0, ..]).to_owned();
        let b = r.foreground.slice(ndarray::s![0, 1, ..]).to_owned();
        assert!(cos(a.as_slice().unwrap(), b.as_slice().unwrap()) < 1.0 - 1e-9);

        let dup = to_reference_embeddings(&[gc(&["an image of a cat", "an image of a cat"])], &enc).unwrap();
        assert_eq!(dup.foreground.slice(ndarray::s![0, 0, ..]), dup.foreground.slice(ndarray::s![0, 1, ..]));

        let ragged = to_reference_embeddings(&[gc(&["an image of a", "an image of b"]), gc(&["an image of c"])], &enc).unwrap();
        assert_eq!(ragged.foreground.dim(), (2, 2, 16));
        assert_eq!(ragged.foreground.slice(ndarray::s![1, 0, ..]), ragged.foreground.slice(ndarray::s![1, 1, ..]));
    }
}
