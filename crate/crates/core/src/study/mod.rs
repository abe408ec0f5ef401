//! Blinded real/fake reader studies: session assembly, responses,
//! confusion accounting and Cohen's kappa.
//!
//! Reader-facing values only ever carry opaque item ids; the mapping to
//! source groups stays inside [`StudySession`] and is revealed only by an
//! unblinded report.

mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::models::Architecture;
use crate::Scalar;

pub use store::{NextItem, SessionStore, EVENTS_FILE, ITEMS_FILE};

/// Images drawn per group when none is given.
pub const DEFAULT_N_PER_GROUP: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceGroup {
    Original,
    VanillaVae,
    DfcVae,
    IntroVae,
    StyleGan,
}

impl SourceGroup {
    pub const ALL: [SourceGroup; 5] = [
        SourceGroup::Original,
        SourceGroup::VanillaVae,
        SourceGroup::DfcVae,
        SourceGroup::IntroVae,
        SourceGroup::StyleGan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceGroup::Original => "original",
            SourceGroup::VanillaVae => "vanilla_vae",
            SourceGroup::DfcVae => "dfc_vae",
            SourceGroup::IntroVae => "intro_vae",
            SourceGroup::StyleGan => "style_gan",
        }
    }

    pub fn is_original(self) -> bool {
        self == SourceGroup::Original
    }
}

impl From<Architecture> for SourceGroup {
    fn from(a: Architecture) -> Self {
        match a {
            Architecture::VanillaVae => SourceGroup::VanillaVae,
            Architecture::DfcVae => SourceGroup::DfcVae,
            Architecture::IntroVae => SourceGroup::IntroVae,
            Architecture::StyleGan => SourceGroup::StyleGan,
        }
    }
}

impl fmt::Display for SourceGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        SourceGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == norm)
            .ok_or_else(|| invalid(format!("unknown source group {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(invalid(format!("label must be \"real\" or \"fake\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub source_group: SourceGroup,
    /// Index of the image within its group's input set.
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub reader_id: String,
    pub item_id: String,
    pub label: Label,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// A shuffled queue of images from several sources plus every reader's
/// answers. `images.image(k)` is the picture shown for `items[k]`.
#[derive(Clone, Debug)]
pub struct StudySession {
    pub session_id: String,
    pub order_seed: u64,
    pub n_per_group: usize,
    pub items: Vec<Item>,
    pub images: ImageSet<f64>,
    /// reader → item → response
    responses: BTreeMap<String, BTreeMap<String, Response>>,
    positions: HashMap<String, usize>,
}

fn random_id(rng: &mut impl Rng) -> String {
    format!("{:016x}", rng.random::<u64>())
}

/// Draws `n_per_group` images from `real` and from every set in `fakes`
/// without replacement, shuffles the union and assigns opaque item ids.
/// The result depends only on the inputs and `seed`.
pub fn create_session<T: Scalar>(
    real: &ImageSet<T>,
    fakes: &BTreeMap<SourceGroup, ImageSet<T>>,
    n_per_group: usize,
    seed: u64,
) -> Result<StudySession> {
    if n_per_group == 0 {
        return Err(invalid("n_per_group must be positive"));
    }
    if fakes.contains_key(&SourceGroup::Original) {
        return Err(invalid("the original group cannot also be a generated set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = std::iter::once((SourceGroup::Original, real)).chain(fakes.iter().map(|(g, s)| (*g, s)));
    let mut picks: Vec<(SourceGroup, usize, &[T])> = Vec::new();
    for (group, set) in groups {
        if !set.same_shape(real) {
            return Err(Error::Shape(format!(
                "{group} images are {}x{}, originals are {}x{}",
                set.height(),
                set.width(),
                real.height(),
                real.width()
            )));
        }
        if set.len() < n_per_group {
            return Err(invalid(format!("{group} has {} images, need {n_per_group}", set.len())));
        }
        for i in index::sample(&mut rng, set.len(), n_per_group).into_iter() {
            picks.push((group, i, set.image(i)));
        }
    }
    picks.shuffle(&mut rng);

    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(picks.len());
    let mut pixels = Vec::with_capacity(picks.len() * real.pixels_per_image());
    for (group, i, img) in picks {
        let id = loop {
            let id = random_id(&mut rng);
            if seen.insert(id.clone()) {
                break id;
            }
        };
        items.push(Item { item_id: id, source_group: group, source_index: i });
        pixels.extend(img.iter().map(|v| v.as_f64()));
    }
    let images = ImageSet::new(real.height(), real.width(), pixels)?;
    let session_id = random_id(&mut rng);
    Ok(StudySession::from_parts(session_id, seed, n_per_group, items, images))
}

/// Progress of one reader, safe to show that reader.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

impl StudySession {
    pub(crate) fn from_parts(
        session_id: String,
        order_seed: u64,
        n_per_group: usize,
        items: Vec<Item>,
        images: ImageSet<f64>,
    ) -> Self {
        let positions = items.iter().enumerate().map(|(k, it)| (it.item_id.clone(), k)).collect();
        Self { session_id, order_seed, n_per_group, items, images, responses: BTreeMap::new(), positions }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.positions.get(item_id).copied()
    }

    /// Groups present in the session, in canonical order.
    pub fn groups(&self) -> Vec<SourceGroup> {
        let mut g: Vec<SourceGroup> = self.items.iter().map(|i| i.source_group).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn readers(&self) -> impl Iterator<Item = &str> {
        self.responses.keys().map(String::as_str)
    }

    pub fn responses_of(&self, reader_id: &str) -> Option<&BTreeMap<String, Response>> {
        self.responses.get(reader_id)
    }

    pub fn response(&self, reader_id: &str, item_id: &str) -> Option<&Response> {
        self.responses.get(reader_id)?.get(item_id)
    }

    pub fn progress(&self, reader_id: &str) -> Progress {
        Progress { answered: self.responses.get(reader_id).map_or(0, BTreeMap::len), total: self.len() }
    }

    /// First item in queue order the reader has not answered.
    pub fn next_unanswered(&self, reader_id: &str) -> Option<usize> {
        let done = self.responses.get(reader_id);
        self.items
            .iter()
            .position(|it| done.is_none_or(|d| !d.contains_key(&it.item_id)))
    }

    /// Validates a response without recording it.
    pub fn prepare_response(&self, reader_id: &str, item_id: &str, label: Label, overwrite: bool) -> Result<Response> {
        if reader_id.trim().is_empty() {
            return Err(invalid("reader_id must not be empty"));
        }
        if !self.positions.contains_key(item_id) {
            return Err(Error::NotFound(format!("item {item_id:?}")));
        }
        if !overwrite && self.response(reader_id, item_id).is_some() {
            return Err(Error::Conflict(format!("reader {reader_id:?} already answered item {item_id:?}")));
        }
        Ok(Response { reader_id: reader_id.into(), item_id: item_id.into(), label, timestamp: now_millis() })
    }

    pub(crate) fn apply(&mut self, r: Response) {
        self.responses.entry(r.reader_id.clone()).or_default().insert(r.item_id.clone(), r);
    }

    /// In-memory variant of recording a response; [`SessionStore`] adds
    /// durability on top.
    pub fn record_response(&mut self, reader_id: &str, item_id: &str, label: Label, overwrite: bool) -> Result<Response> {
        let r = self.prepare_response(reader_id, item_id, label, overwrite)?;
        self.apply(r.clone());
        Ok(r)
    }

    pub fn confusion_table(&self, reader_id: &str) -> Result<ConfusionTable> {
        let answers = self
            .responses
            .get(reader_id)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::InvalidState(format!("reader {reader_id:?} has no responses")))?;
        let mut rows: BTreeMap<SourceGroup, GroupRow> = BTreeMap::new();
        for it in &self.items {
            let row = rows.entry(it.source_group).or_insert_with(|| GroupRow::empty(it.source_group));
            row.size += 1;
            match answers.get(&it.item_id).map(|r| r.label) {
                Some(Label::Real) => row.classified_real += 1,
                Some(Label::Fake) => row.classified_fake += 1,
                None => row.unanswered += 1,
            }
        }
        let groups: Vec<GroupRow> = rows.into_values().map(GroupRow::finish).collect();
        let answered = answers.len();
        Ok(ConfusionTable { reader_id: reader_id.into(), answered, total: self.len(), partial: answered < self.len(), groups })
    }

    /// Kappa between two readers over the items both have answered, or
    /// `None` when they share no items.
    pub fn pair_kappa(&self, a: &str, b: &str) -> Result<Option<KappaEntry>> {
        let (Some(ra), Some(rb)) = (self.responses.get(a), self.responses.get(b)) else {
            return Ok(None);
        };
        let mut la = Vec::new();
        let mut lb = Vec::new();
        for it in &self.items {
            if let (Some(x), Some(y)) = (ra.get(&it.item_id), rb.get(&it.item_id)) {
                la.push(x.label);
                lb.push(y.label);
            }
        }
        if la.is_empty() {
            return Ok(None);
        }
        Ok(Some(KappaEntry {
            reader_a: a.into(),
            reader_b: b.into(),
            kappa: cohen_kappa(&la, &lb)?,
            n_items: la.len(),
            partial: la.len() < self.len(),
        }))
    }

    /// Full report. Item sources appear only when `unblind` is set.
    pub fn report(&self, unblind: bool) -> Result<StudyReport> {
        let readers: Vec<ReaderSummary> = self
            .responses
            .iter()
            .map(|(id, ans)| {
                let mut responses: Vec<Response> = ans.values().cloned().collect();
                responses.sort_by_key(|r| self.positions[&r.item_id]);
                ReaderSummary { reader_id: id.clone(), answered: ans.len(), partial: ans.len() < self.len(), responses }
            })
            .collect();
        let confusion_tables = self
            .responses
            .iter()
            .filter(|(_, a)| !a.is_empty())
            .map(|(id, _)| self.confusion_table(id))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<&String> = self.responses.keys().collect();
        let mut kappa = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if let Some(k) = self.pair_kappa(a, b)? {
                    kappa.push(k);
                }
            }
        }
        let complete = !readers.is_empty() && readers.iter().all(|r| !r.partial);
        Ok(StudyReport {
            session_id: self.session_id.clone(),
            n_items: self.len(),
            n_per_group: self.n_per_group,
            partial: !complete,
            unblinded: unblind,
            readers,
            confusion_tables,
            kappa,
            items: unblind.then(|| self.items.clone()),
        })
    }
}

/// One source group's row of a reader's confusion table. For originals a
/// "real" answer is a true positive and "fake" a false negative; for
/// generated groups "real" is a false positive and "fake" a true negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub source_group: SourceGroup,
    pub size: usize,
    pub classified_real: usize,
    pub classified_fake: usize,
    pub unanswered: usize,
    pub real_pct: f64,
    pub fake_pct: f64,
    pub unanswered_pct: f64,
    /// `"TP"` or `"FP"`
    pub real_outcome: String,
    /// `"FN"` or `"TN"`
    pub fake_outcome: String,
}

impl GroupRow {
    fn empty(g: SourceGroup) -> Self {
        let (r, f) = if g.is_original() { ("TP", "FN") } else { ("FP", "TN") };
        Self {
            source_group: g,
            size: 0,
            classified_real: 0,
            classified_fake: 0,
            unanswered: 0,
            real_pct: 0.0,
            fake_pct: 0.0,
            unanswered_pct: 0.0,
            real_outcome: r.into(),
            fake_outcome: f.into(),
        }
    }

    fn finish(mut self) -> Self {
        let pct = |c: usize| 100.0 * c as f64 / self.size as f64;
        self.real_pct = pct(self.classified_real);
        self.fake_pct = pct(self.classified_fake);
        self.unanswered_pct = pct(self.unanswered);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub reader_id: String,
    pub answered: usize,
    pub total: usize,
    /// Set while the reader has unanswered items.
    pub partial: bool,
    pub groups: Vec<GroupRow>,
}

impl ConfusionTable {
    pub fn row(&self, g: SourceGroup) -> Option<&GroupRow> {
        self.groups.iter().find(|r| r.source_group == g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEntry {
    pub reader_a: String,
    pub reader_b: String,
    pub kappa: f64,
    pub n_items: usize,
    /// Set when the pair's common items do not cover the whole session.
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderSummary {
    pub reader_id: String,
    pub answered: usize,
    pub partial: bool,
    pub responses: Vec<Response>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub session_id: String,
    pub n_items: usize,
    pub n_per_group: usize,
    /// Set unless every reader so far has answered every item.
    pub partial: bool,
    pub unblinded: bool,
    pub readers: Vec<ReaderSummary>,
    pub confusion_tables: Vec<ConfusionTable>,
    pub kappa: Vec<KappaEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<Item>>,
}

/// Cohen's kappa for two label sequences over the same items:
/// `(p_o − p_e)/(1 − p_e)`. When both readers use a single, shared label
/// (`p_e = 1`) the agreement is perfect and the result is 1.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("label sequences cover {} and {} items", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("kappa needs at least one item"));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let real_a = a.iter().filter(|&&l| l == Label::Real).count() as f64 / n;
    let real_b = b.iter().filter(|&&l| l == Label::Real).count() as f64 / n;
    let p_o = agree / n;
    let p_e = real_a * real_b + (1.0 - real_a) * (1.0 - real_b);
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Kappa over item-keyed answers; both maps must cover the same items.
pub fn cohen_kappa_items(a: &BTreeMap<String, Label>, b: &BTreeMap<String, Label>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(invalid("readers answered different items"));
    }
    let la: Vec<Label> = a.values().copied().collect();
    let lb: Vec<Label> = b.values().copied().collect();
    cohen_kappa(&la, &lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(n: usize) -> (ImageSet<f64>, BTreeMap<SourceGroup, ImageSet<f64>>) {
        let mk = |v: f64| ImageSet::new(2, 2, vec![v; 4 * n]).unwrap();
        let mut fakes = BTreeMap::new();
        for (k, g) in SourceGroup::ALL[1..].iter().enumerate() {
            fakes.insert(*g, mk(0.1 * (k + 1) as f64));
        }
        (mk(0.9), fakes)
    }

    fn labels(s: &str) -> Vec<Label> {
        s.chars().map(|c| if c == 'r' { Label::Real } else { Label::Fake }).collect()
    }

    #[test]
    fn default_session_has_250_items() {
        let (real, fakes) = sets(60);
        let s = create_session(&real, &fakes, DEFAULT_N_PER_GROUP, 1).unwrap();
        assert_eq!(s.len(), 250);
        for g in SourceGroup::ALL {
            assert_eq!(s.items.iter().filter(|i| i.source_group == g).count(), 50);
        }
        let again = create_session(&real, &fakes, DEFAULT_N_PER_GROUP, 1).unwrap();
        assert_eq!(s.items, again.items);
        assert_eq!(s.images, again.images);
        let other = create_session(&real, &fakes, DEFAULT_N_PER_GROUP, 2).unwrap();
        assert_ne!(s.items, other.items);
    }

    #[test]
    fn item_ids_leak_nothing() {
        let (real, fakes) = sets(10);
        let s = create_session(&real, &fakes, 10, 3).unwrap();
        for it in &s.items {
            assert!(it.item_id.chars().all(|c| c.is_ascii_hexdigit()));
            for g in SourceGroup::ALL {
                assert!(!it.item_id.contains(g.as_str()));
            }
        }
        // the image shown for an item is the one drawn from its group
        for (k, it) in s.items.iter().enumerate() {
            let expect = if it.source_group.is_original() { real.image(it.source_index) } else { fakes[&it.source_group].image(it.source_index) };
            assert_eq!(s.images.image(k), expect);
        }
    }

    #[test]
    fn insufficient_images_rejected() {
        let (real, fakes) = sets(5);
        assert!(matches!(create_session(&real, &fakes, 6, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn responses_round_trip_and_conflict() {
        let (real, fakes) = sets(3);
        let mut s = create_session(&real, &fakes, 3, 0).unwrap();
        let id = s.items[0].item_id.clone();
        s.record_response("r1", &id, Label::Fake, false).unwrap();
        assert_eq!(s.response("r1", &id).unwrap().label, Label::Fake);
        assert!(matches!(s.record_response("r1", &id, Label::Real, false), Err(Error::Conflict(_))));
        s.record_response("r1", &id, Label::Real, true).unwrap();
        assert_eq!(s.response("r1", &id).unwrap().label, Label::Real);
        assert!(matches!(s.record_response("r1", "nope", Label::Real, false), Err(Error::NotFound(_))));
        assert_eq!(s.next_unanswered("r1"), Some(1));
        assert_eq!(s.next_unanswered("r2"), Some(0));
    }

    #[test]
    fn all_real_and_all_fake_readers() {
        let (real, fakes) = sets(4);
        let mut s = create_session(&real, &fakes, 4, 9).unwrap();
        assert!(matches!(s.confusion_table("a"), Err(Error::InvalidState(_))));
        let ids: Vec<String> = s.items.iter().map(|i| i.item_id.clone()).collect();
        for id in &ids {
            s.record_response("a", id, Label::Real, false).unwrap();
            s.record_response("b", id, Label::Fake, false).unwrap();
        }
        let ta = s.confusion_table("a").unwrap();
        assert!(!ta.partial);
        for row in &ta.groups {
            assert_eq!(row.real_pct, 100.0);
            let expect = if row.source_group.is_original() { "TP" } else { "FP" };
            assert_eq!(row.real_outcome, expect);
        }
        let tb = s.confusion_table("b").unwrap();
        for row in &tb.groups {
            assert_eq!(row.fake_pct, 100.0);
            let expect = if row.source_group.is_original() { "FN" } else { "TN" };
            assert_eq!(row.fake_outcome, expect);
        }
    }

    #[test]
    fn table_layout_with_47_of_50_originals_real() {
        let (real, fakes) = sets(50);
        let mut s = create_session(&real, &fakes, 50, 4).unwrap();
        let mut originals = 0;
        let items = s.items.clone();
        for it in &items {
            let label = if it.source_group.is_original() {
                originals += 1;
                if originals <= 47 { Label::Real } else { Label::Fake }
            } else {
                Label::Fake
            };
            s.record_response("r1", &it.item_id, label, false).unwrap();
        }
        let t = s.confusion_table("r1").unwrap();
        let o = t.row(SourceGroup::Original).unwrap();
        assert_eq!((o.classified_real, o.classified_fake), (47, 3));
        assert!((o.real_pct - 94.0).abs() < 1e-12);
        assert!((o.fake_pct - 6.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_examples() {
        let a = labels("rrffr");
        assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
        // 6 real / 4 fake for both readers, 8 agreements
        let x = labels("rrrrrrffff");
        let y = labels("rrrrrfrfff");
        let k = cohen_kappa(&x, &y).unwrap();
        assert!((k - 0.28 / 0.48).abs() < 1e-12);
        assert_eq!(cohen_kappa(&labels("rrr"), &labels("rrr")).unwrap(), 1.0);
        assert!(cohen_kappa(&x, &a).is_err());
    }

    #[test]
    fn report_blinding() {
        let (real, fakes) = sets(2);
        let mut s = create_session(&real, &fakes, 2, 5).unwrap();
        let r = s.report(false).unwrap();
        assert!(r.partial && r.confusion_tables.is_empty() && r.kappa.is_empty());
        let ids: Vec<String> = s.items.iter().map(|i| i.item_id.clone()).collect();
        for id in &ids {
            s.record_response("a", id, Label::Real, false).unwrap();
            s.record_response("b", id, Label::Fake, false).unwrap();
        }
        let r = s.report(false).unwrap();
        assert_eq!(r.kappa.len(), 1);
        assert!(r.items.is_none());
        let readers = serde_json::to_string(&r.readers).unwrap();
        for g in SourceGroup::ALL {
            assert!(!readers.contains(g.as_str()));
        }
        assert_eq!(s.report(true).unwrap().items.unwrap().len(), 10);
    }
}
