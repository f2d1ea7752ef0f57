//! Offline scored responses, preference pairs, return labels and conditioning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::env::{Token, TokenTask, Vocabulary};
use crate::error::{LabError, Result};
use crate::models::{Model, Role, SamplerConfig};
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub score: Option<f64>,
    pub return_label: Option<f64>,
    pub policy_id: String,
    pub split: Split,
    /// Exemplars, each encoded as `prompt ++ [SEP] ++ response ++ [SEP]`.
    pub conditioning: Option<Vec<Vec<Token>>>,
}

impl ScoredResponse {
    pub fn new(
        prompt: Vec<Token>,
        response: Vec<Token>,
        score: f64,
        policy_id: impl Into<String>,
    ) -> Self {
        Self {
            prompt,
            response,
            score: Some(score),
            return_label: None,
            policy_id: policy_id.into(),
            split: Split::Train,
            conditioning: None,
        }
    }

    /// Conditioning bundle flattened into a single token prefix.
    pub fn conditioning_tokens(&self) -> Vec<Token> {
        self.conditioning
            .iter()
            .flatten()
            .flatten()
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub chosen_score: Option<f64>,
    pub rejected_score: Option<f64>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(LabError::Data(
                "pair has identical chosen and rejected responses".into(),
            ));
        }
        if let (Some(c), Some(r)) = (self.chosen_score, self.rejected_score) {
            if c <= r {
                return Err(LabError::Data(format!(
                    "chosen score {c} does not exceed rejected {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            chosen_score: self.rejected_score,
            rejected_score: self.chosen_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub task: TokenTask,
    pub policies: Vec<String>,
    pub n_prompts: usize,
    pub responses_per_prompt: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub records: Vec<ScoredResponse>,
    pub pairs: Vec<PreferencePair>,
    pub vocab: Vocabulary,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn split_records(&self, split: Split) -> Vec<ScoredResponse> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<PreferencePair> {
        build_pairs(&self.split_records(split))
    }

    pub fn prompts(&self, split: Split) -> Vec<Vec<Token>> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| r.split == split && seen.insert(r.prompt.clone()))
            .map(|r| r.prompt.clone())
            .collect()
    }
}

/// A checkpointed policy plus the temperature it samples at.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    pub id: String,
    pub model: Model,
    pub temperature: f64,
}

/// Prompts grouped in order of first appearance.
fn group_by_prompt(records: &[ScoredResponse]) -> Vec<Vec<&ScoredResponse>> {
    let mut order: Vec<Vec<&ScoredResponse>> = Vec::new();
    let mut at: HashMap<&[Token], usize> = HashMap::new();
    for r in records {
        let i = *at.entry(&r.prompt).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[i].push(r);
    }
    order
}

/// Every strictly ordered score pair within each prompt. Ties and unscored
/// records form no pair.
pub fn build_pairs(records: &[ScoredResponse]) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for group in group_by_prompt(records) {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (group[i], group[j]);
                let (Some(sa), Some(sb)) = (a.score, b.score) else {
                    continue;
                };
                if sa == sb || a.response == b.response {
                    continue;
                }
                let (c, r) = if sa > sb { (a, b) } else { (b, a) };
                out.push(PreferencePair {
                    prompt: a.prompt.clone(),
                    chosen: c.response.clone(),
                    rejected: r.response.clone(),
                    chosen_score: c.score,
                    rejected_score: r.score,
                });
            }
        }
    }
    out
}

/// One pair per prompt: the best against the worst response, if they differ.
pub fn binarize(records: &[ScoredResponse]) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for group in group_by_prompt(records) {
        let scored: Vec<(&ScoredResponse, f64)> = group
            .iter()
            .filter_map(|r| r.score.map(|s| (*r, s)))
            .collect();
        let Some(best) = scored
            .iter()
            .copied()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
        else {
            continue;
        };
        let worst = scored
            .iter()
            .copied()
            .reduce(|a, b| if b.1 < a.1 { b } else { a })
            .unwrap();
        if best.1 > worst.1 {
            out.push(PreferencePair {
                prompt: best.0.prompt.clone(),
                chosen: best.0.response.clone(),
                rejected: worst.0.response.clone(),
                chosen_score: Some(best.1),
                rejected_score: Some(worst.1),
            });
        }
    }
    out
}

/// Samples `n_prompts` distinct prompts and `k` responses each; response `j`
/// comes from policy `j mod P`. All records land in the train split.
pub fn generate_offline(
    task: &TokenTask,
    policies: &[BehaviorPolicy],
    n_prompts: usize,
    k: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if policies.is_empty() {
        return Err(LabError::Data("no behavior policies given".into()));
    }
    task.validate()?;
    for p in policies {
        p.model.expect_role(Role::Policy)?;
    }
    let mut prompt_rng = seed::rng_for(seed, &[seed::tag("prompts")]);
    let mut seen = HashSet::new();
    let mut prompts = Vec::with_capacity(n_prompts);
    let mut attempts = 0usize;
    while prompts.len() < n_prompts {
        attempts += 1;
        if attempts > 100 * n_prompts + 1000 {
            return Err(LabError::Data(format!(
                "task cannot supply {n_prompts} distinct prompts"
            )));
        }
        let p = task.sample_prompt_with(&mut prompt_rng);
        if seen.insert(p.clone()) {
            prompts.push(p);
        }
    }
    let mut records = Vec::with_capacity(n_prompts * k);
    for (i, prompt) in prompts.iter().enumerate() {
        for j in 0..k {
            let pol = &policies[j % policies.len()];
            let mut rng = seed::rng_for(seed, &[seed::tag("response"), i as u64, j as u64]);
            let cfg = SamplerConfig {
                temperature: pol.temperature,
                greedy: false,
                max_len: task.max_response_len,
            };
            let (response, _) = pol.model.sample(&[], prompt, &cfg, &mut rng)?;
            let score = task.ground_truth_reward(prompt, &response)?;
            records.push(ScoredResponse::new(
                prompt.clone(),
                response,
                score,
                pol.id.clone(),
            ));
        }
    }
    let pairs = build_pairs(&records);
    Ok(OfflineDataset {
        records,
        pairs,
        vocab: task.vocab,
        meta: DatasetMeta {
            schema_version: SCHEMA_VERSION,
            task: task.clone(),
            policies: policies.iter().map(|p| p.id.clone()).collect(),
            n_prompts,
            responses_per_prompt: k,
            seed,
        },
    })
}

/// Return label = raw score clamped to [-1, 1].
pub fn assign_returns_from_scores(records: &mut [ScoredResponse]) -> Result<()> {
    for r in records.iter_mut() {
        let s = r
            .score
            .ok_or_else(|| LabError::Data("record has no score".into()))?;
        r.return_label = Some(s.clamp(-1.0, 1.0));
    }
    Ok(())
}

/// Chosen responses get +1 and rejected ones -1. A response that is chosen in
/// one pair and rejected in another for the same prompt is a conflict.
pub fn assign_returns_from_preference(pairs: &[PreferencePair]) -> Result<Vec<ScoredResponse>> {
    let mut out: Vec<ScoredResponse> = Vec::new();
    let mut at: HashMap<(Vec<Token>, Vec<Token>), usize> = HashMap::new();
    for p in pairs {
        p.validate()?;
        for (resp, label, score) in [
            (&p.chosen, 1.0, p.chosen_score),
            (&p.rejected, -1.0, p.rejected_score),
        ] {
            let key = (p.prompt.clone(), resp.clone());
            match at.get(&key) {
                Some(&i) if out[i].return_label != Some(label) => {
                    return Err(LabError::PreferenceConflict)
                }
                Some(_) => {}
                None => {
                    at.insert(key, out.len());
                    out.push(ScoredResponse {
                        prompt: p.prompt.clone(),
                        response: resp.clone(),
                        score,
                        return_label: Some(label),
                        policy_id: "preference".into(),
                        split: Split::Train,
                        conditioning: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Gives every record `k` exemplars from its own source policy, never itself
/// and, unless `allow_same_prompt`, never one answering the same prompt.
pub fn attach_conditioning(
    records: &mut [ScoredResponse],
    vocab: &Vocabulary,
    k: usize,
    allow_same_prompt: bool,
    seed: u64,
) -> Result<()> {
    if k == 0 {
        for r in records.iter_mut() {
            r.conditioning = Some(Vec::new());
        }
        return Ok(());
    }
    let mut by_policy: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_policy.entry(r.policy_id.as_str()).or_default().push(i);
    }
    let mut bundles = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let pool: Vec<usize> = by_policy[r.policy_id.as_str()]
            .iter()
            .copied()
            .filter(|&j| {
                let o = &records[j];
                j != i
                    && !(o.prompt == r.prompt && o.response == r.response)
                    && (allow_same_prompt || o.prompt != r.prompt)
            })
            .collect();
        if pool.len() < k {
            return Err(LabError::Data(format!(
                "policy `{}` has {} eligible exemplars for record {i}, need {k}",
                r.policy_id,
                pool.len()
            )));
        }
        let mut rng = seed::rng_for(seed, &[seed::tag("conditioning"), i as u64]);
        let mut pick: Vec<usize> = index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|x| pool[x])
            .collect();
        pick.sort_unstable();
        let bundle = pick
            .into_iter()
            .map(|j| {
                let o = &records[j];
                let mut t = o.prompt.clone();
                t.push(vocab.sep);
                t.extend_from_slice(&o.response);
                t.push(vocab.sep);
                t
            })
            .collect();
        bundles.push(bundle);
    }
    for (r, b) in records.iter_mut().zip(bundles) {
        r.conditioning = Some(b);
    }
    Ok(())
}

/// Prompt-level split. `fractions` apply to train, heldout and shifted in that
/// order and must sum to 1.
pub fn split(records: &mut [ScoredResponse], fractions: &[f64], seed: u64) -> Result<()> {
    const ORDER: [Split; 3] = [Split::Train, Split::Heldout, Split::Shifted];
    if fractions.is_empty()
        || fractions.len() > ORDER.len()
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
    {
        return Err(LabError::Config(
            "split needs one to three fractions in [0, 1]".into(),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LabError::Config(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let mut prompts: Vec<Vec<Token>> = group_by_prompt(records)
        .iter()
        .map(|g| g[0].prompt.clone())
        .collect();
    prompts.shuffle(&mut seed::rng_for(seed, &[seed::tag("split")]));
    let n = prompts.len();
    let mut assign: HashMap<Vec<Token>, Split> = HashMap::new();
    let mut cum = 0.0;
    let mut lo = 0;
    for (f, s) in fractions.iter().zip(ORDER) {
        cum += f;
        let hi = if (cum - 1.0).abs() <= 1e-9 {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        for p in &prompts[lo..hi.min(n)] {
            assign.insert(p.clone(), s);
        }
        lo = hi.min(n);
    }
    for r in records.iter_mut() {
        r.split = assign[&r.prompt];
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    schema_version: u32,
    split: Split,
    prompt: Vec<Token>,
    response: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    return_label: Option<f64>,
    policy_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conditioning: Option<Vec<Vec<Token>>>,
}

pub fn save_records(path: &Path, records: &[ScoredResponse]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            schema_version: SCHEMA_VERSION,
            split: r.split,
            prompt: r.prompt.clone(),
            response: r.response.clone(),
            score: r.score,
            return_label: r.return_label,
            policy_id: r.policy_id.clone(),
            conditioning: r.conditioning.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<ScoredResponse>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)
            .map_err(|e| LabError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(LabError::Data(format!(
                "{}:{}: schema version {} is not supported",
                path.display(),
                n + 1,
                rec.schema_version
            )));
        }
        if rec.response.is_empty()
            || [rec.score, rec.return_label]
                .iter()
                .flatten()
                .any(|v| !v.is_finite())
        {
            return Err(LabError::Data(format!(
                "{}:{}: empty response or non-finite label",
                path.display(),
                n + 1
            )));
        }
        out.push(ScoredResponse {
            prompt: rec.prompt,
            response: rec.response,
            score: rec.score,
            return_label: rec.return_label,
            policy_id: rec.policy_id,
            split: rec.split,
            conditioning: rec.conditioning,
        });
    }
    Ok(out)
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const META_FILE: &str = "dataset_meta.json";

pub fn save_dataset(dir: &Path, ds: &OfflineDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_records(&dir.join(RECORDS_FILE), &ds.records)?;
    let mut meta = serde_json::to_vec_pretty(&ds.meta)?;
    meta.push(b'\n');
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// Loads records and metadata; pairs are rebuilt from the scores.
pub fn load_dataset(dir: &Path) -> Result<OfflineDataset> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(LabError::MissingArtifact(meta_path.display().to_string()));
    }
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| LabError::Data(format!("{}: {e}", meta_path.display())))?;
    let records = load_records(&dir.join(RECORDS_FILE))?;
    let vocab = meta.task.vocab;
    for r in &records {
        vocab.check(&r.prompt)?;
        vocab.check(&r.response)?;
    }
    let pairs = build_pairs(&records);
    Ok(OfflineDataset {
        records,
        pairs,
        vocab,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(prompt: Vec<Token>, response: Vec<Token>, score: f64, policy: &str) -> ScoredResponse {
        ScoredResponse::new(prompt, response, score, policy)
    }

    #[test]
    fn two_scores_make_one_pair() {
        let rs = vec![
            rec(vec![4], vec![5, 1], 0.9, "a"),
            rec(vec![4], vec![6, 1], 0.2, "a"),
        ];
        let p = build_pairs(&rs);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].chosen, vec![5, 1]);
        assert_eq!(p[0].chosen_score, Some(0.9));
    }

    #[test]
    fn ties_make_no_pairs() {
        let rs: Vec<_> = (0..4)
            .map(|i| rec(vec![4], vec![4 + i, 1], 0.5, "a"))
            .collect();
        assert!(build_pairs(&rs).is_empty());
        assert!(binarize(&rs).is_empty());
    }

    #[test]
    fn score_returns_clamp() {
        let mut rs = vec![
            rec(vec![4], vec![5], 0.7, "a"),
            rec(vec![4], vec![6], 1.6, "a"),
        ];
        assign_returns_from_scores(&mut rs).unwrap();
        assert_eq!(rs[0].return_label, Some(0.7));
        assert_eq!(rs[1].return_label, Some(1.0));
        rs[0].score = None;
        assert!(assign_returns_from_scores(&mut rs).is_err());
    }

    #[test]
    fn preference_returns_and_conflicts() {
        let ab = PreferencePair {
            prompt: vec![4],
            chosen: vec![5],
            rejected: vec![6],
            chosen_score: None,
            rejected_score: None,
        };
        let out = assign_returns_from_preference(&[ab.clone()]).unwrap();
        assert_eq!(out[0].return_label, Some(1.0));
        assert_eq!(out[1].return_label, Some(-1.0));
        assert!(assign_returns_from_preference(&[]).unwrap().is_empty());
        assert!(matches!(
            assign_returns_from_preference(&[ab.clone(), ab.swapped()]),
            Err(LabError::PreferenceConflict)
        ));
        let ac = PreferencePair {
            rejected: vec![7],
            ..ab.clone()
        };
        assert_eq!(assign_returns_from_preference(&[ab, ac]).unwrap().len(), 3);
    }

    #[test]
    fn conditioning_forced_choice_and_k_zero() {
        let vocab = Vocabulary::with_payload(6);
        let mut rs = vec![
            rec(vec![4], vec![5, 1], 0.1, "a"),
            rec(vec![5], vec![6, 1], 0.2, "a"),
            rec(vec![6], vec![7, 1], 0.3, "a"),
        ];
        attach_conditioning(&mut rs, &vocab, 0, false, 0).unwrap();
        assert!(rs.iter().all(|r| r.conditioning == Some(vec![])));
        attach_conditioning(&mut rs, &vocab, 2, false, 0).unwrap();
        assert_eq!(
            rs[0].conditioning,
            Some(vec![vec![5, 3, 6, 1, 3], vec![6, 3, 7, 1, 3]])
        );
        assert!(attach_conditioning(&mut rs, &vocab, 3, false, 0).is_err());
    }

    #[test]
    fn split_halves_and_identity() {
        let mut rs: Vec<_> = (0..100u32)
            .flat_map(|i| {
                let p = vec![4 + i % 6, 4 + (i / 6) % 6, 4 + i / 36];
                vec![rec(p.clone(), vec![5], 0.0, "a"), rec(p, vec![6], 1.0, "a")]
            })
            .collect();
        let before = rs.clone();
        split(&mut rs, &[1.0], 0).unwrap();
        assert_eq!(rs, before);
        split(&mut rs, &[0.5, 0.5], 0).unwrap();
        let ds_prompts = |s| {
            rs.iter()
                .filter(|r| r.split == s)
                .map(|r| r.prompt.clone())
                .collect::<HashSet<_>>()
        };
        let (a, b) = (ds_prompts(Split::Train), ds_prompts(Split::Heldout));
        assert_eq!((a.len(), b.len()), (50, 50));
        assert!(a.is_disjoint(&b));
        assert!(split(&mut rs, &[0.5, 0.4], 0).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rs = vec![
            rec(vec![4], vec![5, 1], 0.1 + 0.2, "a"),
            rec(vec![5], vec![6, 1], -1.0 / 3.0, "b"),
        ];
        rs[1].conditioning = Some(vec![vec![4, 3, 5, 3]]);
        assign_returns_from_scores(&mut rs).unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_records(&p1, &rs).unwrap();
        let back = load_records(&p1).unwrap();
        assert_eq!(back, rs);
        save_records(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(
            &p,
            "{\"schema_version\":1,\"split\":\"train\",\"prompt\":[4]}\n",
        )
        .unwrap();
        assert!(matches!(load_records(&p), Err(LabError::Data(_))));
        fs::write(
            &p,
            "{\"schema_version\":2,\"split\":\"train\",\"prompt\":[4],\"response\":[5],\"policy_id\":\"a\"}\n",
        )
        .unwrap();
        assert!(matches!(load_records(&p), Err(LabError::Data(_))));
    }
}
