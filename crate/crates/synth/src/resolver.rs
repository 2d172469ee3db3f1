//! Rule-based resolver mapping an expression back to scene objects. It
//! parses the text and evaluates every predicate pairwise, sharing no code
//! with the generator, so agreement between the two is a real check.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::scene::{Color, Object, SceneSpec, Shape, Size};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NounPhrase {
    pub size: Option<String>,
    pub color: Option<String>,
    pub noun: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parsed {
    pub target: NounPhrase,
    pub position: Option<String>,
    pub relation: Option<(String, NounPhrase)>,
}

const SIZES: [&str; 2] = ["small", "large"];
const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink",
];
const NOUNS: [&str; 4] = ["circle", "square", "triangle", "object"];

struct Cursor<'a> {
    words: Vec<&'a str>,
    at: usize,
    text: &'a str,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.at).copied()
    }

    fn next(&mut self) -> Option<&'a str> {
        let w = self.peek();
        self.at += 1;
        w
    }

    fn fail(&self, msg: &str) -> SynthError {
        SynthError::Parse {
            text: self.text.to_string(),
            msg: format!("{msg} at word {}", self.at),
        }
    }

    fn expect(&mut self, w: &str) -> Result<()> {
        if self.next() == Some(w) {
            Ok(())
        } else {
            Err(self.fail(&format!("expected {w:?}")))
        }
    }

    fn noun_phrase(&mut self) -> Result<NounPhrase> {
        self.expect("the")?;
        let mut np = NounPhrase::default();
        if let Some(w) = self.peek().filter(|w| SIZES.contains(w)) {
            np.size = Some(w.to_string());
            self.at += 1;
        }
        if let Some(w) = self.peek().filter(|w| COLORS.contains(w)) {
            np.color = Some(w.to_string());
            self.at += 1;
        }
        match self.next() {
            Some(w) if NOUNS.contains(&w) => np.noun = w.to_string(),
            _ => return Err(self.fail("expected a shape noun")),
        }
        Ok(np)
    }
}

pub fn parse(text: &str) -> Result<Parsed> {
    let mut c = Cursor {
        words: text.split_whitespace().collect(),
        at: 0,
        text,
    };
    let target = c.noun_phrase()?;
    let mut position = None;
    let mut relation = None;
    match c.peek() {
        None => {}
        Some(prep @ ("on" | "at" | "in")) => {
            c.at += 1;
            c.expect("the")?;
            let place = c.next().ok_or_else(|| c.fail("missing position"))?;
            let ok = matches!(
                (prep, place),
                ("on", "left")
                    | ("on", "right")
                    | ("at", "top")
                    | ("at", "bottom")
                    | ("in", "middle")
            );
            if !ok {
                return Err(c.fail("unknown position phrase"));
            }
            position = Some(place.to_string());
        }
        Some(rel @ ("left" | "right")) => {
            c.at += 1;
            c.expect("of")?;
            relation = Some((format!("{rel} of"), c.noun_phrase()?));
        }
        Some(rel @ ("above" | "below")) => {
            c.at += 1;
            relation = Some((rel.to_string(), c.noun_phrase()?));
        }
        Some(_) => return Err(c.fail("unexpected word")),
    }
    if c.peek().is_some() {
        return Err(c.fail("trailing words"));
    }
    Ok(Parsed {
        target,
        position,
        relation,
    })
}

fn size_name(s: Size) -> &'static str {
    match s {
        Size::Small => "small",
        Size::Large => "large",
    }
}

fn color_name(c: Color) -> &'static str {
    COLORS[c as usize]
}

fn shape_name(s: Shape) -> &'static str {
    NOUNS[s as usize]
}

fn fits(np: &NounPhrase, o: &Object) -> bool {
    np.size.as_deref().is_none_or(|s| s == size_name(o.size))
        && np.color.as_deref().is_none_or(|c| c == color_name(o.color))
        && (np.noun == "object" || np.noun == shape_name(o.shape))
}

/// `o` is at `place` relative to every other member of `group`.
fn at_place(o: usize, group: &[usize], objects: &[Object], place: &str, margin: f64) -> bool {
    let me = &objects[o];
    let others = group.iter().filter(|&&g| g != o).map(|&g| &objects[g]);
    match place {
        "left" => others.into_iter().all(|b| b.cx - me.cx >= margin),
        "right" => others.into_iter().all(|b| me.cx - b.cx >= margin),
        "top" => others.into_iter().all(|b| b.cy - me.cy >= margin),
        "bottom" => others.into_iter().all(|b| me.cy - b.cy >= margin),
        "middle" => {
            let n = group.len();
            let left = group
                .iter()
                .filter(|&&g| g != o && me.cx - objects[g].cx >= margin)
                .count();
            let right = group
                .iter()
                .filter(|&&g| g != o && objects[g].cx - me.cx >= margin)
                .count();
            n >= 3 && n % 2 == 1 && left == n / 2 && right == n / 2
        }
        _ => false,
    }
}

fn related(a: &Object, b: &Object, rel: &str, margin: f64) -> bool {
    match rel {
        "left of" => b.cx - a.cx >= margin,
        "right of" => a.cx - b.cx >= margin,
        "above" => b.cy - a.cy >= margin,
        "below" => a.cy - b.cy >= margin,
        _ => false,
    }
}

/// Indices of every object the expression can denote. A well-formed,
/// unambiguous expression yields exactly one.
pub fn resolve(spec: &SceneSpec, text: &str, margin: f64) -> Result<Vec<usize>> {
    let p = parse(text)?;
    let objs = &spec.objects;
    let group: Vec<usize> = (0..objs.len())
        .filter(|&i| fits(&p.target, &objs[i]))
        .collect();
    if let Some(place) = &p.position {
        return Ok(group
            .iter()
            .copied()
            .filter(|&o| at_place(o, &group, objs, place, margin))
            .collect());
    }
    if let Some((rel, landmark)) = &p.relation {
        let anchors: Vec<usize> = (0..objs.len())
            .filter(|&i| fits(landmark, &objs[i]))
            .collect();
        let [anchor] = anchors[..] else {
            return Ok(Vec::new());
        };
        return Ok(group
            .into_iter()
            .filter(|&o| o != anchor && related(&objs[o], &objs[anchor], rel, margin))
            .collect());
    }
    Ok(group)
}
