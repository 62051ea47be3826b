use super::encode::Source;
use super::forward::Forward;
use crate::error::{Error, Result};
use crate::octree::{child_origin, FlatTree, NodeContent, NodeType, Octree, OctreeNode};
use crate::tensor::{Real, Var};
use crate::voxel::VoxelGrid;

/// How the decoder decides where to stop subdividing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Follow the node classifier.
    Predicted,
    /// Follow a reference tree's topology; the classifier is not run.
    Known,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(DecodeMode::Predicted),
            "known" => Ok(DecodeMode::Known),
            _ => Err(Error::InvalidArgument(format!("unknown decode mode {s:?}"))),
        }
    }
}

/// Loss terms of a teacher-forced decode, summed over the whole batch.
pub struct DecodeLoss {
    pub label: Var,
    pub recon: Var,
    /// `confusion[truth][predicted]` over node-type codes.
    pub confusion: [[usize; 4]; 4],
}

/// Index of the largest logit among `allowed` codes; ties keep the lowest code.
pub fn argmax_among<T: Real>(logits: &[T], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &c in &allowed[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Node type chosen from classifier logits, clamped to what is legal at `depth`.
pub fn guarded_type<T: Real>(logits: &[T], depth: usize, max_depth: usize) -> NodeType {
    let allowed: &[usize] = if depth >= max_depth { &[0, 1, 2] } else { &[0, 1, 3] };
    NodeType::from_code(argmax_among(logits, allowed) as u8).unwrap()
}

enum Built {
    Pending,
    Empty,
    Full,
    Mixed(VoxelGrid),
    Interior([usize; 8]),
}

struct Frontier<'r> {
    tree: usize,
    slot: usize,
    source: Source,
    reference: Option<&'r OctreeNode>,
}

impl<T: Real> Forward<'_, T> {
    fn decoded_block(&self, probs: Var, item: usize) -> Result<VoxelGrid> {
        let k = self.net.config.leaf_side;
        let n = k * k * k;
        let data = &self.tape.value(probs).data()[item * n..(item + 1) * n];
        let half = T::lit(0.5);
        let mut g = VoxelGrid::empty(k)?;
        for (i, &p) in data.iter().enumerate() {
            if p > half {
                g.set_index(i, true);
            }
        }
        Ok(g)
    }

    /// Decodes `[B, d]` codes into trees, expanding all trees one depth at a time.
    /// `Known` mode needs one reference tree per code.
    pub fn decode_batch(&mut self, codes: Var, mode: DecodeMode, reference: Option<&[&Octree]>) -> Result<Vec<Octree>> {
        let cfg = self.net.config.clone();
        let batch = self.tape.shape(codes)[0];
        let refs = match (mode, reference) {
            (DecodeMode::Known, None) => {
                return Err(Error::InvalidArgument("known-mode decoding needs reference trees".into()))
            }
            (DecodeMode::Known, Some(r)) => {
                if r.len() != batch {
                    return Err(Error::InvalidArgument(format!("{} reference trees for {batch} codes", r.len())));
                }
                super::encode::check_trees(r, cfg.grid_side, cfg.leaf_side)?;
                Some(r)
            }
            (DecodeMode::Predicted, _) => None,
        };
        let max_depth = cfg.levels();
        let root = self.tree_decode(codes)?;
        let mut arena: Vec<Vec<Built>> = (0..batch).map(|_| vec![Built::Pending]).collect();
        let mut frontier: Vec<Frontier<'_>> = (0..batch)
            .map(|b| Frontier { tree: b, slot: 0, source: (root, b), reference: refs.map(|r| r[b].root()) })
            .collect();
        for depth in 0..=max_depth {
            if frontier.is_empty() {
                break;
            }
            let kinds: Vec<NodeType> = match mode {
                DecodeMode::Known => frontier.iter().map(|f| f.reference.unwrap().node_type()).collect(),
                DecodeMode::Predicted => {
                    let items: Vec<Source> = frontier.iter().map(|f| f.source).collect();
                    let x = self.tape.gather(&items)?;
                    let logits = self.classify_node(x)?;
                    self.tape.value(logits).data().chunks(4).map(|l| guarded_type(l, depth, max_depth)).collect()
                }
            };
            let pick = |want: NodeType| -> Vec<usize> { (0..frontier.len()).filter(|&i| kinds[i] == want).collect() };
            let (interior, mixed) = (pick(NodeType::Interior), pick(NodeType::MixedLeaf));
            for (f, &kind) in frontier.iter().zip(&kinds) {
                match kind {
                    NodeType::EmptyLeaf => arena[f.tree][f.slot] = Built::Empty,
                    NodeType::FullLeaf => arena[f.tree][f.slot] = Built::Full,
                    _ => {}
                }
            }
            if !mixed.is_empty() {
                let items: Vec<Source> = mixed.iter().map(|&i| frontier[i].source).collect();
                let x = self.tape.gather(&items)?;
                let probs = self.leaf_decode(x)?;
                for (j, &i) in mixed.iter().enumerate() {
                    let f = &frontier[i];
                    arena[f.tree][f.slot] = Built::Mixed(self.decoded_block(probs, j)?);
                }
            }
            let mut next = Vec::new();
            if !interior.is_empty() {
                let items: Vec<Source> = interior.iter().map(|&i| frontier[i].source).collect();
                let x = self.tape.gather(&items)?;
                let outs = self.node_decode(x, max_depth - depth)?;
                for (j, &i) in interior.iter().enumerate() {
                    let f = &frontier[i];
                    let tree = &mut arena[f.tree];
                    let first = tree.len();
                    tree.extend((0..8).map(|_| Built::Pending));
                    tree[f.slot] = Built::Interior(std::array::from_fn(|s| first + s));
                    for (s, &out) in outs.iter().enumerate() {
                        next.push(Frontier {
                            tree: f.tree,
                            slot: first + s,
                            source: (out, j),
                            reference: f.reference.map(|r| &r.children().unwrap()[s]),
                        });
                    }
                }
            }
            frontier = next;
        }
        arena
            .into_iter()
            .map(|nodes| {
                let root = assemble(&nodes, 0, 0, [0; 3], cfg.grid_side)?;
                Octree::from_root(root, cfg.grid_side, cfg.leaf_side)
            })
            .collect()
    }

    /// Decodes along each tree's ground-truth topology and accumulates the
    /// classifier cross-entropy and the weighted reconstruction loss.
    pub fn decode_teacher_forced(&mut self, codes: Var, flat: &[FlatTree<'_>], alpha: f64) -> Result<DecodeLoss> {
        let max_depth = self.net.config.levels();
        let root = self.tree_decode(codes)?;
        let mut frontier: Vec<(usize, usize, Source)> =
            flat.iter().enumerate().map(|(t, tree)| (t, tree.root(), (root, t))).collect();
        let mut label_terms = Vec::new();
        let mut recon_terms = Vec::new();
        let mut confusion = [[0usize; 4]; 4];
        for depth in 0..=max_depth {
            if frontier.is_empty() {
                break;
            }
            let kinds: Vec<NodeType> = frontier.iter().map(|&(t, i, _)| flat[t].nodes[i].kind).collect();
            let items: Vec<Source> = frontier.iter().map(|f| f.2).collect();
            let x = self.tape.gather(&items)?;
            let logits = self.classify_node(x)?;
            for (l, kind) in self.tape.value(logits).data().chunks(4).zip(&kinds) {
                confusion[kind.code() as usize][argmax_among(l, &[0, 1, 2, 3])] += 1;
            }
            let targets: Vec<usize> = kinds.iter().map(|k| k.code() as usize).collect();
            label_terms.push(self.tape.softmax_cross_entropy(logits, &targets)?);

            let mixed: Vec<usize> = (0..frontier.len()).filter(|&i| kinds[i] == NodeType::MixedLeaf).collect();
            if !mixed.is_empty() {
                let items: Vec<Source> = mixed.iter().map(|&i| frontier[i].2).collect();
                let x = self.tape.gather(&items)?;
                let probs = self.leaf_decode(x)?;
                let mut targets = Vec::with_capacity(self.tape.value(probs).len());
                for &i in &mixed {
                    let (t, n, _) = frontier[i];
                    let block = flat[t].payloads[flat[t].nodes[n].payload.unwrap()];
                    targets.extend(
                        (0..block.voxel_count()).map(|v| if block.get_index(v) { T::one() } else { T::zero() }),
                    );
                }
                recon_terms.push(self.tape.weighted_bce(probs, &targets, alpha)?);
            }

            let interior: Vec<usize> = (0..frontier.len()).filter(|&i| kinds[i] == NodeType::Interior).collect();
            let mut next = Vec::new();
            if !interior.is_empty() {
                let items: Vec<Source> = interior.iter().map(|&i| frontier[i].2).collect();
                let x = self.tape.gather(&items)?;
                let outs = self.node_decode(x, max_depth - depth)?;
                for (j, &i) in interior.iter().enumerate() {
                    let (t, n, _) = frontier[i];
                    let children = flat[t].nodes[n].children.unwrap();
                    for (s, &out) in outs.iter().enumerate() {
                        next.push((t, children[s], (out, j)));
                    }
                }
            }
            frontier = next;
        }
        let label = self.tape.add_n(&label_terms)?;
        let recon = if recon_terms.is_empty() {
            self.tape.constant(crate::tensor::Tensor::scalar(T::zero()))?
        } else {
            self.tape.add_n(&recon_terms)?
        };
        Ok(DecodeLoss { label, recon, confusion })
    }
}

fn assemble(nodes: &[Built], slot: usize, depth: usize, origin: [usize; 3], side: usize) -> Result<OctreeNode> {
    let content = match &nodes[slot] {
        Built::Pending => return Err(Error::MalformedTree("decoder left a node unresolved".into())),
        Built::Empty => NodeContent::Empty,
        Built::Full => NodeContent::Full,
        Built::Mixed(g) => NodeContent::Mixed(g.clone()),
        Built::Interior(children) => {
            let mut built = Vec::with_capacity(8);
            for (s, &c) in children.iter().enumerate() {
                built.push(assemble(nodes, c, depth + 1, child_origin(origin, side, s), side / 2)?);
            }
            NodeContent::Interior(Box::new(built.try_into().map_err(|_| Error::MalformedTree("arity".into()))?))
        }
    };
    Ok(OctreeNode { depth, origin, content })
}
