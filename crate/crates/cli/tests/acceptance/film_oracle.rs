//! Q1..Q4 answers computed straight from the NDJSON lines, with no
//! engine code involved.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value as J;

#[derive(Default)]
pub struct FilmOracle {
    pub vertices: BTreeMap<String, J>,
    out: BTreeMap<(String, String), Vec<String>>,
    pub vertex_lines: usize,
    pub edge_lines: usize,
}

impl FilmOracle {
    pub fn parse(ndjson: &str) -> FilmOracle {
        let mut o = FilmOracle::default();
        for line in ndjson.lines().filter(|l| !l.trim().is_empty()) {
            let j: J = serde_json::from_str(line).unwrap();
            match j["_kind"].as_str().unwrap() {
                "vertex" => {
                    o.vertex_lines += 1;
                    o.vertices.insert(j["id"].as_str().unwrap().to_string(), j);
                }
                _ => {
                    o.edge_lines += 1;
                    let key = (j["_type"].as_str().unwrap().to_string(), j["_src"].as_str().unwrap().to_string());
                    o.out.entry(key).or_default().push(j["_dst"].as_str().unwrap().to_string());
                }
            }
        }
        o
    }

    fn hop<'a>(&'a self, from: impl IntoIterator<Item = &'a String>, ty: &str) -> BTreeSet<&'a String> {
        let mut next = BTreeSet::new();
        for v in from {
            if let Some(ds) = self.out.get(&(ty.to_string(), v.clone())) {
                next.extend(ds.iter());
            }
        }
        next
    }

    fn one(id: &str) -> Vec<String> {
        vec![id.to_string()]
    }

    /// Distinct actors in films directed by Steven Spielberg.
    pub fn q1(&self) -> u64 {
        let start = Self::one("steven.spielberg");
        let films = self.hop(&start, "director.film");
        self.hop(films, "film.actor").len() as u64
    }

    /// Distinct actors with a performance whose character is Batman, in
    /// films Batman appears in.
    pub fn q2(&self) -> u64 {
        let start = Self::one("character.batman");
        let films = self.hop(&start, "character.film");
        let perfs: BTreeSet<&String> = self
            .hop(films, "film.performance")
            .into_iter()
            .filter(|p| self.vertices[*p]["str_str_map"]["character"] == "Batman")
            .collect();
        self.hop(perfs, "performance.actor").len() as u64
    }

    /// First names of Spielberg films with Tom Hanks in the action genre, sorted.
    pub fn q3(&self) -> Vec<String> {
        let start = Self::one("steven.spielberg");
        let mut names: Vec<String> = self
            .hop(&start, "director.film")
            .into_iter()
            .filter(|f| {
                let one = [(*f).clone()];
                self.hop(&one, "film.actor").contains(&"tom.hanks".to_string())
                    && self.hop(&one, "film.genre").contains(&"action".to_string())
            })
            .map(|f| self.vertices[f]["name"][0].as_str().unwrap().to_string())
            .collect();
        names.sort();
        names
    }

    /// Distinct films of everyone who shares a film with Tom Hanks.
    pub fn q4(&self) -> u64 {
        let start = Self::one("tom.hanks");
        let films = self.hop(&start, "actor.film");
        let costars = self.hop(films, "film.actor");
        self.hop(costars, "actor.film").len() as u64
    }
}
