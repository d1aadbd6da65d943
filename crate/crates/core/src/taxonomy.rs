//! Label taxonomy: class names, thing/stuff split, the implicit no-object
//! class, and the optional background class used by the stuff remapping.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    class_names: Vec<String>,
    is_thing: Vec<bool>,
    background_class: Option<usize>,
}

impl Taxonomy {
    /// Builds a taxonomy from explicit class descriptors.
    ///
    /// Requires at least two classes. A mix of thing and stuff classes is
    /// required unless `allow_uniform_kind` is set (callers that deliberately
    /// build e.g. an all-stuff taxonomy opt in explicitly).
    pub fn new(
        class_names: Vec<String>,
        is_thing: Vec<bool>,
        allow_uniform_kind: bool,
    ) -> Result<Self> {
        if class_names.len() != is_thing.len() {
            return Err(Error::config("class_names and is_thing lengths differ"));
        }
        if class_names.len() < 2 {
            return Err(Error::config("taxonomy needs at least two classes"));
        }
        let things = is_thing.iter().filter(|&&t| t).count();
        if !allow_uniform_kind && (things == 0 || things == is_thing.len()) {
            return Err(Error::config(
                "taxonomy needs at least one thing and one stuff class",
            ));
        }
        Ok(Taxonomy {
            class_names,
            is_thing,
            background_class: None,
        })
    }

    /// Synthetic taxonomy with `num_things` thing classes followed by
    /// `num_stuff` stuff classes, named `thing-i` / `stuff-i`.
    pub fn synthetic(num_things: usize, num_stuff: usize) -> Result<Self> {
        let mut names = Vec::with_capacity(num_things + num_stuff);
        let mut is_thing = Vec::with_capacity(num_things + num_stuff);
        for i in 0..num_things {
            names.push(format!("thing-{i:02}"));
            is_thing.push(true);
        }
        for i in 0..num_stuff {
            names.push(format!("stuff-{i:02}"));
            is_thing.push(false);
        }
        Taxonomy::new(names, is_thing, num_things == 0 || num_stuff == 0)
    }

    /// Designates `class` as the background target for stuff remapping.
    pub fn with_background(mut self, class: usize) -> Result<Self> {
        if class >= self.num_classes() {
            return Err(Error::config("background class out of range"));
        }
        if self.is_thing[class] {
            return Err(Error::config("background class must be a stuff class"));
        }
        self.background_class = Some(class);
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Index of the no-object class: one past the last real class.
    pub fn no_object_index(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_thing(&self, class: usize) -> bool {
        self.is_thing[class]
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    pub fn background_class(&self) -> Option<usize> {
        self.background_class
    }

    pub fn thing_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.is_thing[c]).collect()
    }

    pub fn stuff_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| !self.is_thing[c]).collect()
    }
}
