//! Referring-expression grammar and the dialect-specific generator.
//!
//! Grammar: `the [size] [color] (shape | object)`, optionally followed by a
//! position phrase (`on the left`, `at the top`, `in the middle`, ...) or by a
//! relation (`left of`, `right of`, `above`, `below`) and a second clause.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scene::{Color, Object, SceneSpec, Shape, Size};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// Attributes plus absolute position words.
    Spatial,
    /// Colour, size and shape only.
    Appearance,
    /// Two clauses joined by a relative position.
    Relational,
}

impl Dialect {
    pub const ALL: [Dialect; 3] = [Dialect::Spatial, Dialect::Appearance, Dialect::Relational];

    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::Spatial => "spatial",
            Dialect::Appearance => "appearance",
            Dialect::Relational => "relational",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// A noun phrase: any subset of the three attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

impl Clause {
    /// The clause using the attributes of `o` selected by the bit mask
    /// (1 = size, 2 = color, 4 = shape).
    pub fn of(o: &Object, mask: u8) -> Self {
        Self {
            size: (mask & 1 != 0).then_some(o.size),
            color: (mask & 2 != 0).then_some(o.color),
            shape: (mask & 4 != 0).then_some(o.shape),
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.size.is_some() as usize + self.color.is_some() as usize + self.shape.is_some() as usize
    }

    fn matches(&self, o: &Object) -> bool {
        self.size.is_none_or(|s| s == o.size)
            && self.color.is_none_or(|c| c == o.color)
            && self.shape.is_none_or(|s| s == o.shape)
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["the"];
        if let Some(s) = self.size {
            w.push(s.word());
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        w.push(self.shape.map_or("object", Shape::word));
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Middle,
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Left,
        Position::Right,
        Position::Top,
        Position::Bottom,
        Position::Middle,
    ];

    pub fn words(self) -> [&'static str; 3] {
        match self {
            Position::Left => ["on", "the", "left"],
            Position::Right => ["on", "the", "right"],
            Position::Top => ["at", "the", "top"],
            Position::Bottom => ["at", "the", "bottom"],
            Position::Middle => ["in", "the", "middle"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// `a` stands in this relation to `b` by at least `margin` pixels.
    fn holds(self, a: &Object, b: &Object, margin: f64) -> bool {
        match self {
            Relation::LeftOf => a.cx + margin <= b.cx,
            Relation::RightOf => a.cx >= b.cx + margin,
            Relation::Above => a.cy + margin <= b.cy,
            Relation::Below => a.cy >= b.cy + margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    /// Vocabulary ids, without the start token.
    pub ids: Vec<usize>,
}

impl Expression {
    pub fn from_words(words: &[&str]) -> Result<Self> {
        let owned: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        Ok(Self {
            ids: vocab::encode(&owned)?,
            text: owned.join(" "),
        })
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split(' ')
    }
}

/// The candidate that is extreme in direction `pos` among `cands`, if it
/// beats every other candidate by `margin`.
fn extreme(objects: &[Object], cands: &[usize], pos: Position, margin: f64) -> Option<usize> {
    let key = |i: usize| match pos {
        Position::Left | Position::Right | Position::Middle => objects[i].cx,
        Position::Top | Position::Bottom => objects[i].cy,
    };
    let mut sorted = cands.to_vec();
    sorted.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let n = sorted.len();
    let (pick, neighbours): (usize, Vec<usize>) = match pos {
        Position::Left | Position::Top => (sorted[0], sorted.get(1).copied().into_iter().collect()),
        Position::Right | Position::Bottom => (
            sorted[n - 1],
            n.checked_sub(2).map(|i| sorted[i]).into_iter().collect(),
        ),
        Position::Middle => {
            if n < 3 || n.is_multiple_of(2) {
                return None;
            }
            (sorted[n / 2], vec![sorted[n / 2 - 1], sorted[n / 2 + 1]])
        }
    };
    neighbours
        .iter()
        .all(|&o| (key(o) - key(pick)).abs() >= margin)
        .then_some(pick)
}

fn candidates(objects: &[Object], clause: &Clause) -> Vec<usize> {
    (0..objects.len())
        .filter(|&i| clause.matches(&objects[i]))
        .collect()
}

/// Non-empty attribute subsets of `o` that single it out, smallest first.
fn unique_clauses(objects: &[Object], idx: usize) -> Vec<Clause> {
    let mut out: Vec<Clause> = (1u8..8)
        .map(|m| Clause::of(&objects[idx], m))
        .filter(|c| candidates(objects, c) == [idx])
        .collect();
    out.sort_by_key(Clause::attribute_count);
    out
}

fn appearance<R: Rng>(spec: &SceneSpec, referent: usize, rng: &mut R) -> Option<Vec<&'static str>> {
    let unique = unique_clauses(&spec.objects, referent);
    let first = unique.first()?;
    let minimal: Vec<&Clause> = unique
        .iter()
        .filter(|c| c.attribute_count() == first.attribute_count())
        .collect();
    let clause = if rng.random_bool(0.6) {
        *minimal[rng.random_range(0..minimal.len())]
    } else {
        unique[rng.random_range(0..unique.len())]
    };
    Some(clause.words())
}

fn spatial<R: Rng>(
    spec: &SceneSpec,
    referent: usize,
    margin: f64,
    rng: &mut R,
) -> Option<Vec<&'static str>> {
    let mut masks: Vec<u8> = (1u8..8).collect();
    masks.shuffle(rng);
    for m in masks {
        let clause = Clause::of(&spec.objects[referent], m);
        let cands = candidates(&spec.objects, &clause);
        if cands.len() == 1 {
            return Some(clause.words());
        }
        let mut valid: Vec<Position> = Position::ALL
            .into_iter()
            .filter(|&p| extreme(&spec.objects, &cands, p, margin) == Some(referent))
            .collect();
        if valid.is_empty() {
            continue;
        }
        valid.shuffle(rng);
        let mut w = clause.words();
        w.extend(valid[0].words());
        return Some(w);
    }
    None
}

fn relational<R: Rng>(
    spec: &SceneSpec,
    referent: usize,
    margin: f64,
    rng: &mut R,
) -> Option<Vec<&'static str>> {
    let objs = &spec.objects;
    let target = Clause::of(&objs[referent], 7);
    let cands = candidates(objs, &target);
    let mut options = Vec::new();
    for l in (0..objs.len()).filter(|&l| l != referent) {
        let Some(landmark) = unique_clauses(objs, l).first().copied() else {
            continue;
        };
        for r in Relation::ALL {
            let hits: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|&c| c != l && r.holds(&objs[c], &objs[l], margin))
                .collect();
            if hits == [referent] {
                options.push((r, landmark));
            }
        }
    }
    if options.is_empty() {
        return None;
    }
    let (r, landmark) = options[rng.random_range(0..options.len())];
    let mut w = target.words();
    w.extend_from_slice(r.words());
    w.extend(landmark.words());
    Some(w)
}

/// An expression in `dialect` naming exactly `referent`, or `None` when the
/// dialect cannot single it out (the caller then draws another scene).
pub fn emit_expression<R: Rng>(
    spec: &SceneSpec,
    referent: usize,
    dialect: Dialect,
    margin: f64,
    rng: &mut R,
) -> Option<Expression> {
    let words = match dialect {
        Dialect::Appearance => appearance(spec, referent, rng)?,
        Dialect::Spatial => spatial(spec, referent, margin, rng)?,
        Dialect::Relational => relational(spec, referent, margin, rng)?,
    };
    Expression::from_words(&words).ok()
}
