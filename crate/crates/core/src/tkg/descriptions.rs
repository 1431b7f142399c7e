use std::io::BufRead;

use super::{EntityId, RelationId, TkgError, Vocabularies};

/// Name and description text for every entity, display text for every relation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptionStore {
    entities: Vec<(String, String)>,
    relations: Vec<String>,
}

impl DescriptionStore {
    /// Names from the vocabularies, empty descriptions.
    pub fn from_vocab(vocabs: &Vocabularies) -> Self {
        let mut store = DescriptionStore::default();
        store.sync_entities(vocabs);
        store.sync_relations(vocabs);
        store
    }

    /// Adds name-only entries for entities added to the vocabulary since the
    /// store was built.
    pub fn sync_entities(&mut self, vocabs: &Vocabularies) {
        for name in &vocabs.entities.names()[self.entities.len()..] {
            self.entities.push((name.clone(), String::new()));
        }
    }

    pub fn sync_relations(&mut self, vocabs: &Vocabularies) {
        for name in &vocabs.relations.names()[self.relations.len()..] {
            self.relations.push(name.clone());
        }
    }

    /// Reads `entity-name<TAB>description` lines. Returns the number of lines
    /// naming entities absent from the vocabulary (those lines are ignored).
    pub fn load_entity_descriptions<R: BufRead>(&mut self, reader: R, vocabs: &Vocabularies) -> Result<usize, TkgError> {
        let mut unknown = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, desc) = line.split_once('\t').ok_or(TkgError::MalformedLine(i + 1))?;
            match vocabs.entity(name.trim()) {
                Some(e) => self.entities[e.index()].1 = desc.trim().to_string(),
                None => unknown += 1,
            }
        }
        Ok(unknown)
    }

    /// Reads `relation-name<TAB>text` lines replacing the relation's display text.
    pub fn load_relation_descriptions<R: BufRead>(&mut self, reader: R, vocabs: &Vocabularies) -> Result<usize, TkgError> {
        let mut unknown = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, text) = line.split_once('\t').ok_or(TkgError::MalformedLine(i + 1))?;
            match vocabs.relation(name.trim()) {
                Some(p) => self.relations[p.index()] = text.trim().to_string(),
                None => unknown += 1,
            }
        }
        Ok(unknown)
    }

    /// Registers a new entity (e.g. an unseen one supplied at prediction time).
    pub fn add_entity(&mut self, vocabs: &mut Vocabularies, name: &str, description: &str) -> EntityId {
        let e = EntityId(vocabs.entities.intern(name));
        self.sync_entities(vocabs);
        self.entities[e.index()].1 = description.to_string();
        e
    }

    pub fn set_description(&mut self, e: EntityId, description: &str) {
        self.entities[e.index()].1 = description.to_string();
    }

    pub fn entity(&self, e: EntityId) -> Option<(&str, &str)> {
        self.entities.get(e.index()).map(|(n, d)| (n.as_str(), d.as_str()))
    }

    pub fn set_relation(&mut self, p: RelationId, text: &str) {
        self.relations[p.index()] = text.to_string();
    }

    pub fn relation_name(&self, p: RelationId) -> &str {
        &self.relations[p.index()]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityId, &str, &str)> {
        self.entities.iter().enumerate().map(|(i, (n, d))| (EntityId(i as u32), n.as_str(), d.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::parse_quadruple_file;

    #[test]
    fn descriptions_attach_by_name() {
        let mut v = Vocabularies::new();
        parse_quadruple_file("Virtue Party\tr\tB\t1\n".as_bytes(), &mut v).unwrap();
        let mut store = DescriptionStore::from_vocab(&v);
        let text = "Virtue Party\tTurkey, Sunni International Religious\nNobody\tx\n";
        let unknown = store.load_entity_descriptions(text.as_bytes(), &v).unwrap();
        assert_eq!(unknown, 1);
        assert_eq!(store.entity(EntityId(0)), Some(("Virtue Party", "Turkey, Sunni International Religious")));
        assert_eq!(store.entity(EntityId(1)), Some(("B", "")));
    }

    #[test]
    fn new_entities_get_names() {
        let mut v = Vocabularies::new();
        let mut store = DescriptionStore::from_vocab(&v);
        let e = store.add_entity(&mut v, "Newcomer", "somewhere");
        assert_eq!(store.entity(e), Some(("Newcomer", "somewhere")));
        assert_eq!(v.num_entities(), 1);
    }
}
