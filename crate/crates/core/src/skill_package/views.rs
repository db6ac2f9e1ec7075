use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Frontmatter, PackageError, SkillPackage};

/// Which components a skill has and how they are arranged.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Structure {
    /// Level-2 headings in document order; `""` is the untitled preamble.
    pub section_headings: Vec<String>,
    pub references: BTreeSet<String>,
    pub scripts: BTreeSet<String>,
    pub assets: BTreeSet<String>,
    pub frontmatter_keys: BTreeSet<String>,
}

impl Structure {
    pub fn has_section(&self, heading: &str) -> bool {
        self.section_headings.iter().any(|h| h == heading)
    }

    pub fn section_index(&self, heading: &str) -> Option<usize> {
        self.section_headings.iter().position(|h| h == heading)
    }

    /// Headings other than the preamble.
    pub fn titled_sections(&self) -> impl Iterator<Item = &String> {
        self.section_headings.iter().filter(|h| !h.is_empty())
    }

    /// Checks the list/set invariants: no duplicate headings, every path
    /// under its directory.
    pub fn check(&self) -> Result<(), String> {
        let unique: BTreeSet<_> = self.section_headings.iter().collect();
        if unique.len() != self.section_headings.len() {
            return Err("duplicate section heading".into());
        }
        let prefixed = |set: &BTreeSet<String>, prefix: &str| set.iter().all(|p| p.starts_with(prefix));
        if !prefixed(&self.references, super::REFERENCES_DIR)
            || !prefixed(&self.scripts, super::SCRIPTS_DIR)
            || !prefixed(&self.assets, super::ASSETS_DIR)
        {
            return Err("component path outside its directory".into());
        }
        Ok(())
    }
}

/// The instantiated text, code and data filling a [`Structure`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContentState {
    pub frontmatter: Frontmatter,
    pub section_bodies: BTreeMap<String, String>,
    pub reference_texts: BTreeMap<String, String>,
    pub script_texts: BTreeMap<String, String>,
    pub asset_blobs: BTreeMap<String, Vec<u8>>,
}

fn same_keys<'a, V>(
    what: &str,
    map: &'a BTreeMap<String, V>,
    expected: impl Iterator<Item = &'a String>,
) -> Result<(), String> {
    let have: BTreeSet<&String> = map.keys().collect();
    let want: BTreeSet<&String> = expected.collect();
    if have == want {
        return Ok(());
    }
    let missing: Vec<_> = want.difference(&have).collect();
    let extra: Vec<_> = have.difference(&want).collect();
    Err(format!("{what}: missing {missing:?}, unexpected {extra:?}"))
}

impl ContentState {
    /// The compatibility condition: every map's key set equals the
    /// corresponding component set of `structure`.
    pub fn check_compatible(&self, structure: &Structure) -> Result<(), String> {
        same_keys("sections", &self.section_bodies, structure.section_headings.iter())?;
        same_keys("references", &self.reference_texts, structure.references.iter())?;
        same_keys("scripts", &self.script_texts, structure.scripts.iter())?;
        same_keys("assets", &self.asset_blobs, structure.assets.iter())?;
        let keys: BTreeSet<String> = self.frontmatter.keys().iter().cloned().collect();
        if keys != structure.frontmatter_keys {
            return Err(format!(
                "frontmatter keys {keys:?} differ from {:?}",
                structure.frontmatter_keys
            ));
        }
        Ok(())
    }
}

pub fn derive_structure(pkg: &SkillPackage) -> Structure {
    Structure {
        section_headings: pkg.body_sections.iter().map(|(h, _)| h.clone()).collect(),
        references: pkg.references.iter().map(|(p, _)| p.clone()).collect(),
        scripts: pkg.scripts.iter().map(|(p, _)| p.clone()).collect(),
        assets: pkg.assets.iter().map(|(p, _)| p.clone()).collect(),
        frontmatter_keys: pkg.frontmatter.keys().iter().cloned().collect(),
    }
}

pub fn extract_content(pkg: &SkillPackage, structure: &Structure) -> Result<ContentState, PackageError> {
    let actual = derive_structure(pkg);
    if &actual != structure {
        return Err(PackageError::StructureMismatch(format!(
            "package has {actual:?}, given {structure:?}"
        )));
    }
    Ok(ContentState {
        frontmatter: pkg.frontmatter.clone(),
        section_bodies: pkg.body_sections.iter().cloned().collect(),
        reference_texts: pkg.references.iter().cloned().collect(),
        script_texts: pkg.scripts.iter().cloned().collect(),
        asset_blobs: pkg.assets.iter().cloned().collect(),
    })
}

/// Builds the package for `(content, structure)`. Sections follow the
/// structure's heading order; files come out sorted by path.
pub fn recompose(content: &ContentState, structure: &Structure) -> Result<SkillPackage, PackageError> {
    content
        .check_compatible(structure)
        .map_err(PackageError::IncompatibleContent)?;
    Ok(SkillPackage {
        root_name: content.frontmatter.name().to_string(),
        frontmatter: content.frontmatter.clone(),
        body_sections: structure
            .section_headings
            .iter()
            .map(|h| (h.clone(), content.section_bodies[h].clone()))
            .collect(),
        scripts: content.script_texts.clone().into_iter().collect(),
        references: content.reference_texts.clone().into_iter().collect(),
        assets: content.asset_blobs.clone().into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill_package::parse_package;

    fn seed() -> SkillPackage {
        let mut snap = BTreeMap::new();
        snap.insert(
            "SKILL.md".to_string(),
            b"---\nname: orqa\ndescription: d\n---\nintro\n\n## Workflow\nsteps\n\n## Checks\ncheck\n".to_vec(),
        );
        snap.insert("references/question-types.md".to_string(), b"# Types\n".to_vec());
        parse_package(&snap).unwrap()
    }

    #[test]
    fn seed_structure() {
        let s = derive_structure(&seed());
        assert_eq!(s.references.len(), 1);
        assert!(s.scripts.is_empty());
        assert_eq!(s.section_headings, ["", "Workflow", "Checks"]);
        assert_eq!(
            s.frontmatter_keys,
            ["description", "name"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn extract_and_recompose_are_inverse() {
        let pkg = seed();
        let s = derive_structure(&pkg);
        let c = extract_content(&pkg, &s).unwrap();
        assert_eq!(c.reference_texts["references/question-types.md"], "# Types\n");
        assert_eq!(recompose(&c, &s).unwrap(), pkg);
    }

    #[test]
    fn mismatch_errors() {
        let pkg = seed();
        let mut s = derive_structure(&pkg);
        s.scripts.insert("scripts/run.py".into());
        assert!(matches!(
            extract_content(&pkg, &s),
            Err(PackageError::StructureMismatch(_))
        ));

        let s = derive_structure(&pkg);
        let mut c = extract_content(&pkg, &s).unwrap();
        c.section_bodies.remove("Checks");
        assert!(matches!(recompose(&c, &s), Err(PackageError::IncompatibleContent(_))));

        let mut c = extract_content(&pkg, &s).unwrap();
        c.reference_texts.insert("references/extra.md".into(), "x".into());
        assert!(matches!(recompose(&c, &s), Err(PackageError::IncompatibleContent(_))));
    }
}
