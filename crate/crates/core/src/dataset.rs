//! Trial bundles and the on-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json              {"participants": ["P01", ...]}
//! <root>/truth.json                synthetic datasets only
//! <root>/P01/manifest.json         trials, attended labels, payload names
//! <root>/P01/trial01_eeg.f32       + trial01_eeg.json sidecar
//! <root>/P01/trial01_male_envelope.f32, ..._female_onsets.f32, ...
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AadError, Result};
use crate::features::{FeatureKind, FeatureSignal};
use crate::io::{read_multi, read_signal, write_multi, write_signal};
use crate::linear::SpeakerRole;
use crate::signal::MultiSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Male,
    Female,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::Male => Speaker::Female,
            Speaker::Female => Speaker::Male,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Male => "male",
            Speaker::Female => "female",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speaker {
    type Err = AadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Speaker::Male),
            "female" => Ok(Speaker::Female),
            other => Err(AadError::param(format!("unknown speaker {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFeatures {
    pub envelope: FeatureSignal,
    pub onsets: FeatureSignal,
}

impl SpeakerFeatures {
    pub fn get(&self, kind: FeatureKind) -> &FeatureSignal {
        match kind {
            FeatureKind::Envelope => &self.envelope,
            FeatureKind::Onsets => &self.onsets,
        }
    }
}

/// One trial: two-channel EEG and both speakers' features, all at 64 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBundle {
    /// 1-based
    pub index: usize,
    pub eeg: MultiSignal,
    pub attended: SpeakerFeatures,
    pub ignored: SpeakerFeatures,
    pub attended_label: Speaker,
}

impl TrialBundle {
    pub fn feature(&self, role: SpeakerRole, kind: FeatureKind) -> &FeatureSignal {
        match role {
            SpeakerRole::Ignored => self.ignored.get(kind),
            _ => self.attended.get(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.eeg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eeg.is_empty()
    }

    pub fn fs(&self) -> f64 {
        self.eeg.fs()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.eeg.len();
        for f in [&self.attended.envelope, &self.attended.onsets, &self.ignored.envelope, &self.ignored.onsets] {
            if f.len() != n || f.fs() != self.eeg.fs() {
                return Err(AadError::Length(format!("trial {}: feature/EEG shape mismatch", self.index)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: String,
    pub trials: Vec<TrialBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub participants: Vec<Participant>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetIndex {
    participants: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpeakerFiles {
    envelope: String,
    onsets: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrialEntry {
    index: usize,
    attended: Speaker,
    eeg: String,
    male: SpeakerFiles,
    female: SpeakerFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    participant: String,
    trials: Vec<TrialEntry>,
}

fn feature_extra(kind: FeatureKind, speaker: Speaker) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("kind".into(), Value::from(kind.as_str()));
    m.insert("speaker".into(), Value::from(speaker.as_str()));
    m
}

pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    let index = DatasetIndex { participants: dataset.participants.iter().map(|p| p.id.clone()).collect() };
    fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&index)?)?;
    for p in &dataset.participants {
        write_participant(&root.join(&p.id), p)?;
    }
    Ok(())
}

pub fn write_participant(dir: &Path, participant: &Participant) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for t in &participant.trials {
        let stem = format!("trial{:02}", t.index);
        let eeg = format!("{stem}_eeg.f32");
        write_multi(&dir.join(&eeg), &t.eeg, Map::new())?;
        let files = |speaker: Speaker| -> Result<SpeakerFiles> {
            let feats = if speaker == t.attended_label { &t.attended } else { &t.ignored };
            let env = format!("{stem}_{speaker}_envelope.f32");
            let ons = format!("{stem}_{speaker}_onsets.f32");
            write_signal(&dir.join(&env), "envelope", &feats.envelope.signal, feature_extra(FeatureKind::Envelope, speaker))?;
            write_signal(&dir.join(&ons), "onsets", &feats.onsets.signal, feature_extra(FeatureKind::Onsets, speaker))?;
            Ok(SpeakerFiles { envelope: env, onsets: ons })
        };
        let male = files(Speaker::Male)?;
        let female = files(Speaker::Female)?;
        entries.push(TrialEntry { index: t.index, attended: t.attended_label, eeg, male, female });
    }
    let manifest = Manifest { participant: participant.id.clone(), trials: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_participant(dir: &Path) -> Result<Participant> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| AadError::ingestion(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AadError::ingestion(&mpath, e))?;
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for entry in manifest.trials {
        let eeg = read_multi(&dir.join(&entry.eeg))?;
        let load = |files: &SpeakerFiles| -> Result<SpeakerFeatures> {
            let (_, env) = read_signal(&dir.join(&files.envelope))?;
            let (_, ons) = read_signal(&dir.join(&files.onsets))?;
            Ok(SpeakerFeatures {
                envelope: FeatureSignal::new(env, FeatureKind::Envelope),
                onsets: FeatureSignal::new(ons, FeatureKind::Onsets),
            })
        };
        let male = load(&entry.male)?;
        let female = load(&entry.female)?;
        let (attended, ignored) = match entry.attended {
            Speaker::Male => (male, female),
            Speaker::Female => (female, male),
        };
        let trial = TrialBundle { index: entry.index, eeg, attended, ignored, attended_label: entry.attended };
        trial.validate().map_err(|e| AadError::ingestion(dir.join(&entry.eeg), e))?;
        trials.push(trial);
    }
    if trials.is_empty() {
        return Err(AadError::ingestion(&mpath, "manifest lists no trials"));
    }
    Ok(Participant { id: manifest.participant, trials })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let ipath = root.join("dataset.json");
    let text = fs::read_to_string(&ipath).map_err(|e| AadError::ingestion(&ipath, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| AadError::ingestion(&ipath, e))?;
    let participants = index
        .participants
        .iter()
        .map(|id| read_participant(&root.join(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { participants })
}
