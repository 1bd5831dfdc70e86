//! Bundled film/actor/director sample dataset.
//!
//! Every vertex is an `entity` keyed by `id`. Roles come from the edges:
//! directors point at films (`director.film`), films at actors, genres and
//! performances, characters at films and performances at actors. The
//! generator is seeded with a fixed value so the dataset is the same for
//! every run and every `--seed`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const GRAPH: &str = "film";

pub const Q1: &str = include_str!("../queries/q1.json");
pub const Q2: &str = include_str!("../queries/q2.json");
pub const Q3: &str = include_str!("../queries/q3.json");
pub const Q4: &str = include_str!("../queries/q4.json");

pub const QUERIES: [(&str, &str); 4] = [("Q1", Q1), ("Q2", Q2), ("Q3", Q3), ("Q4", Q4)];

pub const EDGE_TYPES: [&str; 8] = [
    "director.film",
    "film.director",
    "film.actor",
    "actor.film",
    "film.genre",
    "character.film",
    "film.performance",
    "performance.actor",
];

const GENRES: [&str; 20] = [
    "action",
    "adventure",
    "animation",
    "biography",
    "comedy",
    "crime",
    "documentary",
    "drama",
    "family",
    "fantasy",
    "history",
    "horror",
    "musical",
    "mystery",
    "romance",
    "science.fiction",
    "sport",
    "thriller",
    "war",
    "western",
];

const DIRECTORS: usize = 300;
const ACTORS: usize = 3500;
const FILMS: usize = 1800;
const CHARACTERS: usize = 400;
const SEED: u64 = 0x5eed_f11a;

pub fn schema_json() -> String {
    let mut types = vec![json!({
        "type": "entity",
        "kind": "vertex",
        "fields": [
            {"id": 0, "name": "id", "type": "STRING"},
            {"id": 1, "name": "name", "type": "LIST<STRING>"},
            {"id": 2, "name": "str_str_map", "type": "MAP<STRING,STRING>"}
        ],
        "primary_key": "id"
    })];
    for t in EDGE_TYPES {
        types.push(json!({"type": t, "kind": "edge", "fields": []}));
    }
    serde_json::to_string_pretty(&types).unwrap()
}

struct Out {
    vtext: String,
    etext: String,
    vertices: usize,
    edges: usize,
}

impl Out {
    fn vertex(&mut self, id: &str, names: &[String], map: Option<(&str, &str)>) {
        let mut v = json!({"_kind": "vertex", "_type": "entity", "id": id, "name": names});
        if let Some((k, val)) = map {
            v["str_str_map"] = json!({ k: val });
        }
        writeln!(self.vtext, "{v}").unwrap();
        self.vertices += 1;
    }

    fn edge(&mut self, ty: &str, src: &str, dst: &str) {
        let e = json!({"_kind": "edge", "_type": ty, "_src_type": "entity", "_src": src,
            "_dst_type": "entity", "_dst": dst});
        writeln!(self.etext, "{e}").unwrap();
        self.edges += 1;
    }
}

// popularity skew: low indexes are picked far more often
fn skewed(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.gen();
    ((u * u * u) * n as f64) as usize
}

fn title(i: usize) -> String {
    const A: [&str; 12] =
        ["Silent", "Last", "Crimson", "Broken", "Golden", "Hidden", "Lost", "Iron", "Distant", "Burning", "Quiet", "Final"];
    const B: [&str; 12] =
        ["Harbor", "Frontier", "Empire", "Signal", "River", "Garden", "Storm", "Witness", "Machine", "Kingdom", "Voyage", "Promise"];
    format!("The {} {} {}", A[i % 12], B[(i / 12) % 12], i / 144 + 1)
}

/// NDJSON for the whole dataset with its vertex and edge line counts.
pub fn dataset() -> (String, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut out = Out { vtext: String::new(), etext: String::new(), vertices: 0, edges: 0 };

    let directors: Vec<String> = std::iter::once("steven.spielberg".to_string())
        .chain((1..DIRECTORS).map(|i| format!("director.{i}")))
        .collect();
    let actors: Vec<String> = std::iter::once("tom.hanks".to_string())
        .chain((1..ACTORS).map(|i| format!("actor.{i}")))
        .collect();
    let characters: Vec<String> = ["character.batman".to_string(), "character.robin".to_string()]
        .into_iter()
        .chain((2..CHARACTERS).map(|i| format!("character.{i}")))
        .collect();
    let films: Vec<String> = (0..FILMS).map(|i| format!("film.{i}")).collect();

    out.vertex("steven.spielberg", &["Steven Spielberg".into()], None);
    for d in &directors[1..] {
        out.vertex(d, &[format!("Director {}", &d[9..])], None);
    }
    out.vertex("tom.hanks", &["Tom Hanks".into(), "Thomas Jeffrey Hanks".into()], None);
    for a in &actors[1..] {
        out.vertex(a, &[format!("Actor {}", &a[6..])], None);
    }
    for g in GENRES {
        out.vertex(g, &[g.replace('.', " ")], None);
    }
    out.vertex("character.batman", &["Batman".into(), "Bruce Wayne".into()], None);
    out.vertex("character.robin", &["Robin".into(), "Dick Grayson".into()], None);
    for c in &characters[2..] {
        out.vertex(c, &[format!("Character {}", &c[10..])], None);
    }
    for (i, f) in films.iter().enumerate() {
        let mut names = vec![title(i)];
        if rng.gen_bool(0.2) {
            names.push(format!("{} (working title)", title(i + 7)));
        }
        out.vertex(f, &names, None);
    }

    // the first films are Spielberg's, the next few feature Batman
    let spielberg = 0..32;
    let batman = 40..49;
    let mut perf = 0usize;
    for (i, f) in films.iter().enumerate() {
        let director = if spielberg.contains(&i) { 0 } else { 1 + skewed(&mut rng, DIRECTORS - 1) };
        out.edge("director.film", &directors[director], f);
        out.edge("film.director", f, &directors[director]);

        let mut cast = BTreeSet::new();
        if (spielberg.contains(&i) && i % 3 == 0) || rng.gen_bool(0.015) {
            cast.insert(0);
        }
        let size = rng.gen_range(3..=12);
        while cast.len() < size {
            cast.insert(1 + skewed(&mut rng, ACTORS - 1));
        }
        let mut cast: Vec<usize> = cast.into_iter().collect();
        cast.shuffle(&mut rng);
        for &a in &cast {
            out.edge("film.actor", f, &actors[a]);
            out.edge("actor.film", &actors[a], f);
        }

        let mut genres = BTreeSet::new();
        if spielberg.contains(&i) && i % 2 == 0 {
            genres.insert(0);
        }
        for _ in 0..rng.gen_range(1..=3) {
            genres.insert(if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..GENRES.len()) });
        }
        for g in genres {
            out.edge("film.genre", f, GENRES[g]);
        }

        // named performances for the leading roles
        let leads = rng.gen_range(1..=3).min(cast.len());
        let mut roles: Vec<usize> = Vec::new();
        if batman.contains(&i) {
            roles.push(0);
            // a sidekick sharing the film, filtered out by the character predicate
            if i % 2 == 1 {
                roles.push(1);
            }
        }
        while roles.len() < leads {
            let c = 2 + rng.gen_range(0..CHARACTERS - 2);
            if !roles.contains(&c) {
                roles.push(c);
            }
        }
        for (slot, &c) in roles.iter().enumerate() {
            let id = format!("performance.{perf}");
            perf += 1;
            let role = if c == 0 {
                "Batman".to_string()
            } else if c == 1 {
                "Robin".to_string()
            } else {
                format!("Character {c}")
            };
            out.vertex(&id, &[format!("{role} in {}", title(i))], Some(("character", &role)));
            let actor = &actors[cast[slot % cast.len()]];
            out.edge("character.film", &characters[c], f);
            out.edge("film.performance", f, &id);
            out.edge("performance.actor", &id, actor);
        }
    }
    // vertices are all listed before the edges that reference them
    let text = out.vtext + &out.etext;
    (text, out.vertices, out.edges)
}
