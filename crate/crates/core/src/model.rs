//! Multi-task encoder-decoder with a registry of shareable components.
//!
//! Every task owns an output layer. Encoder, attention and decoder are
//! either per task or shared by all tasks, depending on [`SharingMode`]:
//!
//! | mode              | encoders | attentions | decoders | outputs |
//! |-------------------|----------|------------|----------|---------|
//! | `Separate`        | T        | T          | T        | T       |
//! | `SharedEncoder`   | 1        | T          | T        | T       |
//! | `SharedAttention` | 1        | 1          | T        | T       |
//! | `SharedDecoder`   | 1        | 1          | 1        | T       |
//!
//! Source embeddings belong to the encoder, target embeddings to the
//! decoder. A shared decoder embeds the union of all task vocabularies;
//! each output layer still predicts over its own task vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Batch, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{
    attention_cache, cond_gru_step_projected, encode, init_decoder, AttentionParams, DecoderParams, EncoderParams,
    LayerDims, OutputParams, SourceBatch,
};
use crate::tensor::{log_softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    Separate,
    SharedEncoder,
    SharedAttention,
    SharedDecoder,
}

impl SharingMode {
    pub const ALL: [SharingMode; 4] = [
        SharingMode::Separate,
        SharingMode::SharedEncoder,
        SharingMode::SharedAttention,
        SharingMode::SharedDecoder,
    ];

    pub fn shares(self, role: Role) -> bool {
        use SharingMode::*;
        match role {
            Role::Encoder => self != Separate,
            Role::Attention => matches!(self, SharedAttention | SharedDecoder),
            Role::Decoder => self == SharedDecoder,
            Role::Output => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Separate => "separate",
            SharingMode::SharedEncoder => "shared-encoder",
            SharingMode::SharedAttention => "shared-attention",
            SharingMode::SharedDecoder => "shared-decoder",
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SharingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown sharing mode '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Attention,
    Decoder,
    Output,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Encoder, Role::Attention, Role::Decoder, Role::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Attention => "attention",
            Role::Decoder => "decoder",
            Role::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub target_vocab: Vocabulary,
    /// Decoding emits exactly one label per source word.
    pub length_constrained: bool,
    pub is_main: bool,
}

impl TaskSpec {
    /// An unconstrained translation task.
    pub fn translation(name: &str, target_vocab: Vocabulary) -> Self {
        TaskSpec {
            name: name.to_string(),
            target_vocab,
            length_constrained: false,
            is_main: false,
        }
    }

    /// A length-constrained labeling task.
    pub fn tagging(name: &str, labels: Vocabulary) -> Self {
        TaskSpec {
            length_constrained: true,
            ..Self::translation(name, labels)
        }
    }

    pub fn main(mut self) -> Self {
        self.is_main = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentInfo {
    pub name: String,
    pub role: Role,
    pub params: Vec<ParamId>,
}

/// Maps `(task, role)` to the parameter set serving it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ComponentRegistry {
    components: Vec<ComponentInfo>,
    map: BTreeMap<(String, Role), usize>,
}

impl ComponentRegistry {
    pub fn components(&self) -> &[ComponentInfo] {
        &self.components
    }

    pub fn component(&self, task: &str, role: Role) -> Option<&ComponentInfo> {
        self.map.get(&(task.to_string(), role)).map(|&i| &self.components[i])
    }

    pub fn count(&self, role: Role) -> usize {
        self.components.iter().filter(|c| c.role == role).count()
    }

    /// Component names serving `task`.
    pub fn components_of(&self, task: &str) -> BTreeSet<String> {
        Role::ALL
            .iter()
            .filter_map(|&r| self.component(task, r))
            .map(|c| c.name.clone())
            .collect()
    }

    /// Expected per-role counts for `mode` with `tasks` tasks.
    pub fn expected_counts(mode: SharingMode, tasks: usize) -> [(Role, usize); 4] {
        Role::ALL.map(|r| (r, if mode.shares(r) { 1 } else { tasks }))
    }

    pub fn verify(&self, mode: SharingMode, tasks: usize) -> Result<()> {
        for (role, want) in Self::expected_counts(mode, tasks) {
            let have = self.count(role);
            if have != want {
                return Err(Error::Model(format!(
                    "{mode} with {tasks} task(s) needs {want} {} component(s), found {have}",
                    role.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TaskBinding {
    encoder: usize,
    attention: usize,
    decoder: usize,
    output: usize,
    /// Task-local target id -> decoder embedding row.
    to_decoder: Vec<usize>,
}

/// Borrowed view of the parameter sets one task runs through.
#[derive(Clone, Copy, Debug)]
pub struct TaskComponents<'a> {
    pub encoder: &'a EncoderParams,
    pub attention: &'a AttentionParams,
    pub decoder: &'a DecoderParams,
    pub output: &'a OutputParams,
    pub to_decoder: &'a [usize],
    pub spec: &'a TaskSpec,
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    mode: SharingMode,
    dims: LayerDims,
    seed: u64,
    src_vocab: Vocabulary,
    tasks: Vec<TaskSpec>,
    store: ParamStore,
    registry: ComponentRegistry,
    encoders: Vec<EncoderParams>,
    attentions: Vec<AttentionParams>,
    decoders: Vec<DecoderParams>,
    decoder_vocabs: Vec<Vocabulary>,
    outputs: Vec<OutputParams>,
    bindings: Vec<TaskBinding>,
}

impl MultiTaskModel {
    pub fn build(
        mode: SharingMode,
        tasks: Vec<TaskSpec>,
        dims: LayerDims,
        src_vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if tasks.is_empty() {
            return Err(Error::Model("a model needs at least one task".into()));
        }
        let mut names = BTreeSet::new();
        for t in &tasks {
            if t.name.is_empty() || !names.insert(t.name.as_str()) {
                return Err(Error::Model(format!("duplicate or empty task name '{}'", t.name)));
            }
            if t.target_vocab.is_empty() {
                return Err(Error::Model(format!(
                    "task '{}' has an empty target vocabulary",
                    t.name
                )));
            }
        }
        let mains = tasks.iter().filter(|t| t.is_main).count();
        if mains != 1 {
            return Err(Error::Model(format!("exactly one main task required, found {mains}")));
        }
        if src_vocab.is_empty() {
            return Err(Error::Model("empty source vocabulary".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut registry = ComponentRegistry::default();
        let n = tasks.len();
        let owner = |role: Role, i: usize| -> (usize, String) {
            if mode.shares(role) {
                (0, format!("{}.all", role.as_str()))
            } else {
                (i, format!("{}.{}", role.as_str(), tasks[i].name))
            }
        };
        let groups = |role: Role| if mode.shares(role) { 1 } else { n };

        let register = |registry: &mut ComponentRegistry, role: Role, name: String, params: Vec<ParamId>| {
            registry.components.push(ComponentInfo { name, role, params });
            registry.components.len() - 1
        };

        let mut comp_index: BTreeMap<(Role, usize), usize> = BTreeMap::new();
        let mut encoders = Vec::new();
        for i in 0..groups(Role::Encoder) {
            let (_, name) = owner(Role::Encoder, i);
            let p = EncoderParams::init(&mut store, &name, src_vocab.len(), &dims, &mut rng)?;
            let c = register(&mut registry, Role::Encoder, name, p.ids());
            comp_index.insert((Role::Encoder, i), c);
            encoders.push(p);
        }
        let mut attentions = Vec::new();
        for i in 0..groups(Role::Attention) {
            let (_, name) = owner(Role::Attention, i);
            let p = AttentionParams::init(&mut store, &name, &dims, &mut rng)?;
            let c = register(&mut registry, Role::Attention, name, p.ids());
            comp_index.insert((Role::Attention, i), c);
            attentions.push(p);
        }
        let mut decoders = Vec::new();
        let mut decoder_vocabs = Vec::new();
        let mut to_decoder = vec![Vec::new(); n];
        for i in 0..groups(Role::Decoder) {
            let (_, name) = owner(Role::Decoder, i);
            let served: Vec<usize> = if mode.shares(Role::Decoder) {
                (0..n).collect()
            } else {
                vec![i]
            };
            let mut vocab = Vocabulary::new();
            for &t in &served {
                let tv = &tasks[t].target_vocab;
                to_decoder[t] = (0..tv.len()).map(|id| vocab.insert(tv.token(id))).collect();
            }
            let p = DecoderParams::init(&mut store, &name, vocab.len(), &dims, &mut rng)?;
            let c = register(&mut registry, Role::Decoder, name, p.ids());
            comp_index.insert((Role::Decoder, i), c);
            decoders.push(p);
            decoder_vocabs.push(vocab);
        }
        let mut outputs = Vec::new();
        for (i, t) in tasks.iter().enumerate() {
            let (_, name) = owner(Role::Output, i);
            let p = OutputParams::init(&mut store, &name, t.target_vocab.len(), &dims, &mut rng)?;
            let c = register(&mut registry, Role::Output, name, p.ids());
            comp_index.insert((Role::Output, i), c);
            outputs.push(p);
        }

        let mut bindings = Vec::with_capacity(n);
        for (i, t) in tasks.iter().enumerate() {
            let slot = |role: Role| owner(role, i).0;
            for role in Role::ALL {
                registry
                    .map
                    .insert((t.name.clone(), role), comp_index[&(role, slot(role))]);
            }
            bindings.push(TaskBinding {
                encoder: slot(Role::Encoder),
                attention: slot(Role::Attention),
                decoder: slot(Role::Decoder),
                output: i,
                to_decoder: std::mem::take(&mut to_decoder[i]),
            });
        }
        registry.verify(mode, n)?;

        Ok(MultiTaskModel {
            mode,
            dims,
            seed,
            src_vocab,
            tasks,
            store,
            registry,
            encoders,
            attentions,
            decoders,
            decoder_vocabs,
            outputs,
            bindings,
        })
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn main_task(&self) -> &TaskSpec {
        self.tasks.iter().find(|t| t.is_main).expect("validated at build")
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn registry(&self) -> &ComponentRegistry {
        &self.registry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The target-embedding vocabulary of the decoder serving `task`.
    pub fn decoder_vocab(&self, task: &str) -> Result<&Vocabulary> {
        let i = self.task_index(task)?;
        Ok(&self.decoder_vocabs[self.bindings[i].decoder])
    }

    pub fn components(&self, task: &str) -> Result<TaskComponents<'_>> {
        let i = self.task_index(task)?;
        let b = &self.bindings[i];
        Ok(TaskComponents {
            encoder: &self.encoders[b.encoder],
            attention: &self.attentions[b.attention],
            decoder: &self.decoders[b.decoder],
            output: &self.outputs[b.output],
            to_decoder: &b.to_decoder,
            spec: &self.tasks[i],
        })
    }

    /// Teacher-forced logits for `target_in` (block-major `[B x T]`, task-local
    /// ids starting with BOS). Rows of the result are time-major: row `t*B + b`.
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        task: &str,
        source: &SourceBatch,
        target_in: &[usize],
        target_len: usize,
    ) -> Result<Var> {
        let c = self.components(task)?;
        let st = &self.store;
        let bsz = source.batch;
        if bsz == 0 || target_len == 0 || target_in.len() != bsz * target_len {
            return Err(Error::Empty("batch"));
        }
        let ann = encode(g, st, c.encoder, source)?;
        let cache = attention_cache(g, st, c.attention, &ann)?;
        let mut s = init_decoder(g, st, c.decoder.init_w, &ann)?;

        let mut time_major = Vec::with_capacity(bsz * target_len);
        for t in 0..target_len {
            for b in 0..bsz {
                let id = target_in[b * target_len + t];
                let mapped = *c.to_decoder.get(id).ok_or(Error::IndexOutOfRange {
                    what: "task target vocabulary",
                    index: id,
                    bound: c.to_decoder.len(),
                })?;
                time_major.push(mapped);
            }
        }
        let table = g.param(st, c.decoder.embed);
        let y = g.lookup(table, &time_major)?;
        let w1 = g.param(st, c.decoder.gru1.w);
        let b1 = g.param(st, c.decoder.gru1.b);
        let yw = g.matmul(y, w1)?;
        let y_proj = g.add(yw, b1)?;

        let mut states = Vec::with_capacity(target_len);
        let mut contexts = Vec::with_capacity(target_len);
        for t in 0..target_len {
            let yp = g.slice_rows(y_proj, t * bsz, (t + 1) * bsz)?;
            let out = cond_gru_step_projected(g, st, c.decoder, c.attention, yp, s, &ann, &cache)?;
            s = out.state;
            states.push(out.state);
            contexts.push(out.context);
        }
        let s_all = g.concat_rows(&states)?;
        let c_all = g.concat_rows(&contexts)?;
        let hidden = crate::layers::output_hidden(g, st, c.output, s_all, y, c_all)?;
        let wo = g.param(st, c.output.w_o);
        g.matmul(hidden, wo)
    }

    /// Mean per-token negative log-likelihood of the batch targets.
    pub fn forward_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.task_index(&batch.task)?;
        if batch.size() == 0 {
            return Err(Error::Empty("batch"));
        }
        let logits = self.teacher_forced_logits(g, &batch.task, &batch.source, &batch.target_in, batch.target_len)?;
        let (bsz, tl) = (batch.size(), batch.target_len);
        let mut targets = Vec::with_capacity(bsz * tl);
        let mut valid = Vec::with_capacity(bsz * tl);
        for t in 0..tl {
            for b in 0..bsz {
                targets.push(batch.target_out[b * tl + t]);
                valid.push(batch.target_valid[b * tl + t]);
            }
        }
        g.cross_entropy(logits, &targets, &valid)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.forward_loss(&mut g, batch)?;
        Ok(g.value(l).item())
    }

    /// Forward, backward, and adds the gradients into the parameter store.
    /// Existing gradients are kept.
    pub fn accumulate_gradients(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.forward_loss(&mut g, batch)?;
        g.backward(l)?;
        g.accumulate_param_grads(&mut self.store);
        Ok(g.value(l).item())
    }

    /// Whether each component currently holds any nonzero gradient.
    pub fn gradient_presence(&self) -> BTreeMap<String, bool> {
        self.registry
            .components
            .iter()
            .map(|c| {
                let nonzero = c
                    .params
                    .iter()
                    .any(|&p| self.store.grad(p).data().iter().any(|&g| g != 0.0));
                (c.name.clone(), nonzero)
            })
            .collect()
    }

    /// Zeroes gradients, runs one batch, and reports [`Self::gradient_presence`].
    pub fn grads_by_component(&mut self, batch: &Batch) -> Result<BTreeMap<String, bool>> {
        self.store.zero_grads();
        self.accumulate_gradients(batch)?;
        let presence = self.gradient_presence();
        self.store.zero_grads();
        Ok(presence)
    }

    /// Sum of teacher-forced token log-probabilities for each sequence in
    /// `targets` (task-local ids; EOS is scored only if present).
    pub fn score_sequences(&self, task: &str, source: &[usize], targets: &[Vec<usize>]) -> Result<Vec<f64>> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let len = targets.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let bsz = targets.len();
        let mut src_ids = source.to_vec();
        src_ids.push(EOS);
        let src_rows = vec![src_ids; bsz];
        let src = SourceBatch::from_sequences(&src_rows, PAD)?;
        let mut target_in = vec![PAD; bsz * len];
        for (b, t) in targets.iter().enumerate() {
            target_in[b * len] = BOS;
            for (i, &y) in t.iter().enumerate().take(len - 1) {
                target_in[b * len + i + 1] = y;
            }
        }
        let mut g = Graph::new();
        let logits = self.teacher_forced_logits(&mut g, task, &src, &target_in, len)?;
        let lp = log_softmax_rows(g.value(logits));
        let v = lp.cols();
        Ok(targets
            .iter()
            .enumerate()
            .map(|(b, t)| {
                t.iter()
                    .enumerate()
                    .map(|(i, &y)| lp.data()[(i * bsz + b) * v + y])
                    .sum()
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            mode: self.mode,
            dims: self.dims,
            seed: self.seed,
            src_vocab: self.src_vocab.clone(),
            tasks: self.tasks.clone(),
            components: self
                .registry
                .components
                .iter()
                .map(|c| MetaComponent {
                    name: c.name.clone(),
                    role: c.role,
                    params: c.params.iter().map(|&p| self.store.get(p).name.clone()).collect(),
                })
                .collect(),
        };
        let mut w = container::Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.json(&meta)?;
        let items: Vec<(&str, &Tensor)> = self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        w.tensors(&items);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = container::Reader::new(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let meta: ModelMeta = r.json()?;
        let tensors = r.tensors()?;
        r.finish()?;
        let mut model = MultiTaskModel::build(meta.mode, meta.tasks, meta.dims, meta.src_vocab, meta.seed)?;
        let listed: Vec<MetaComponent> = model
            .registry
            .components
            .iter()
            .map(|c| MetaComponent {
                name: c.name.clone(),
                role: c.role,
                params: c.params.iter().map(|&p| model.store.get(p).name.clone()).collect(),
            })
            .collect();
        if listed != meta.components {
            return Err(Error::Corrupt(
                "component registry does not match the sharing mode".into(),
            ));
        }
        if tensors.len() != model.store.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter '{name}'")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        model.registry.verify(model.mode, model.tasks.len())?;
        Ok(model)
    }

    /// Same architecture, tasks and vocabularies as `other`.
    pub fn same_structure(&self, other: &MultiTaskModel) -> bool {
        self.mode == other.mode
            && self.dims == other.dims
            && self.src_vocab == other.src_vocab
            && self.tasks == other.tasks
    }
}

const MODEL_MAGIC: &[u8; 8] = b"MTSEQMDL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct MetaComponent {
    name: String,
    role: Role,
    params: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    mode: SharingMode,
    dims: LayerDims,
    seed: u64,
    src_vocab: Vocabulary,
    tasks: Vec<TaskSpec>,
    components: Vec<MetaComponent>,
}

/// Self-describing binary container: magic, version, length-prefixed
/// sections, and a trailing SHA-256 of everything before it.
pub(crate) mod container {
    use super::*;

    pub struct Writer {
        buf: Vec<u8>,
    }

    impl Writer {
        pub fn new(magic: &[u8; 8], version: u32) -> Self {
            let mut buf = magic.to_vec();
            buf.extend_from_slice(&version.to_le_bytes());
            Writer { buf }
        }

        pub fn bytes(&mut self, b: &[u8]) {
            self.buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
            self.buf.extend_from_slice(b);
        }

        pub fn json<T: Serialize>(&mut self, value: &T) -> Result<()> {
            let b = serde_json::to_vec(value).map_err(|e| Error::Invalid(e.to_string()))?;
            self.bytes(&b);
            Ok(())
        }

        pub fn tensors(&mut self, items: &[(&str, &Tensor)]) {
            self.buf.extend_from_slice(&(items.len() as u64).to_le_bytes());
            for &(name, t) in items {
                self.bytes(name.as_bytes());
                self.buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    self.buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &x in t.data() {
                    self.buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }

        pub fn finish(mut self) -> Vec<u8> {
            let digest = Sha256::digest(&self.buf);
            self.buf.extend_from_slice(&digest);
            self.buf
        }
    }

    pub struct Reader<'a> {
        body: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(bytes: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Self> {
            if bytes.len() < 8 + 4 + 32 || &bytes[..8] != magic {
                return Err(Error::Corrupt("bad magic or truncated file".into()));
            }
            let (body, digest) = bytes.split_at(bytes.len() - 32);
            if Sha256::digest(body).as_slice() != digest {
                return Err(Error::Corrupt("checksum mismatch".into()));
            }
            let found = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
            if found != version {
                return Err(Error::Version {
                    found,
                    expected: version,
                });
            }
            Ok(Reader { body, pos: 12 })
        }

        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.body.len() {
                return Err(Error::Corrupt("unexpected end of data".into()));
            }
            let s = &self.body[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        pub fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        pub fn bytes(&mut self) -> Result<&'a [u8]> {
            let n = self.u64()? as usize;
            self.take(n)
        }

        pub fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
            let b = self.bytes()?;
            serde_json::from_slice(b).map_err(|e| Error::Corrupt(format!("metadata: {e}")))
        }

        pub fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
            let n = self.u64()? as usize;
            let mut out = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let name =
                    String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Corrupt("parameter name".into()))?;
                let rank = self.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(self.u64()? as usize);
                }
                let len: usize = shape.iter().product();
                let raw = self.take(len * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
                out.push((name, t));
            }
            Ok(out)
        }

        pub fn finish(self) -> Result<()> {
            if self.pos != self.body.len() {
                return Err(Error::Corrupt("trailing bytes".into()));
            }
            Ok(())
        }
    }
}
