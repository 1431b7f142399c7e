use super::{DescriptionStore, Quadruple, RelationId, TkgError, Vocabularies};

/// Prefix carried by the name of every inverse relation.
pub const INVERSE_PREFIX: &str = "inverse ";

/// Relation `p` has inverse `p + base_count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InverseRelations {
    pub base_count: usize,
}

impl InverseRelations {
    /// Registers `inverse <name>` for every relation in the vocabulary.
    pub fn register(vocabs: &mut Vocabularies, store: &mut DescriptionStore) -> Result<Self, TkgError> {
        if vocabs.relations.names().iter().any(|n| n.starts_with(INVERSE_PREFIX)) {
            return Err(TkgError::AlreadyInverted);
        }
        let base_count = vocabs.relations.len();
        for p in 0..base_count as u32 {
            let name = format!("{INVERSE_PREFIX}{}", vocabs.relations.name(p));
            let id = vocabs.relations.intern(&name);
            debug_assert_eq!(id as usize, base_count + p as usize);
        }
        store.sync_relations(vocabs);
        Ok(InverseRelations { base_count })
    }

    pub fn inverse(&self, p: RelationId) -> RelationId {
        let b = self.base_count as u32;
        if p.0 < b {
            RelationId(p.0 + b)
        } else {
            RelationId(p.0 - b)
        }
    }

    pub fn is_inverse(&self, p: RelationId) -> bool {
        p.index() >= self.base_count
    }

    pub fn invert(&self, q: &Quadruple) -> Quadruple {
        Quadruple { s: q.o, p: self.inverse(q.p), o: q.s, t: q.t }
    }
}

/// Appends `(o, p⁻¹, s, t)` for every `(s, p, o, t)`, keeping the originals first.
pub fn invert_facts(facts: &[Quadruple], inv: &InverseRelations) -> Vec<Quadruple> {
    let mut out = Vec::with_capacity(facts.len() * 2);
    out.extend_from_slice(facts);
    out.extend(facts.iter().map(|q| inv.invert(q)));
    out
}

/// Adds inverse relations to the vocabulary and description store and
/// returns the doubled fact list.
pub fn add_inverse_relations(
    facts: &[Quadruple],
    vocabs: &mut Vocabularies,
    store: &mut DescriptionStore,
) -> Result<(Vec<Quadruple>, InverseRelations), TkgError> {
    let inv = InverseRelations::register(vocabs, store)?;
    Ok((invert_facts(facts, &inv), inv))
}
