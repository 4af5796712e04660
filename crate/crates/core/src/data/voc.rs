//! Pascal-VOC style annotation XML (the layout used by the BCCD dataset).

use std::fmt::Write;

use roxmltree::{Document, Node};

use super::{AnnotatedObject, Annotation};
use crate::boxes::{clip_box, BBox};
use crate::error::{Error, Result};

fn err(doc: &Document, node: Node, message: impl Into<String>) -> Error {
    Error::Annotation {
        element: node.tag_name().name().to_string(),
        line: doc.text_pos_at(node.range().start).row,
        message: message.into(),
    }
}

fn child<'a, 'input>(doc: &Document, node: Node<'a, 'input>, name: &str) -> Result<Node<'a, 'input>> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .ok_or_else(|| err(doc, node, format!("missing <{name}> element")))
}

fn opt_text<'a>(node: Node<'a, '_>, name: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(name)).map(|c| c.text().unwrap_or(""))
}

fn number<T: std::str::FromStr>(doc: &Document, parent: Node, name: &str) -> Result<T> {
    let node = child(doc, parent, name)?;
    let text = node.text().unwrap_or("").trim();
    text.parse()
        .map_err(|_| err(doc, node, format!("invalid number {text:?}")))
}

pub fn parse_voc_xml(text: &str) -> Result<Annotation> {
    let doc = Document::parse(text).map_err(|e| Error::Annotation {
        element: "document".into(),
        line: e.pos().row,
        message: e.to_string(),
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(err(&doc, root, "root element must be <annotation>"));
    }
    let filename = opt_text(root, "filename").unwrap_or("").to_string();
    let size = child(&doc, root, "size")?;
    let width: usize = number(&doc, size, "width")?;
    let height: usize = number(&doc, size, "height")?;
    let depth: usize = match opt_text(size, "depth") {
        Some(_) => number(&doc, size, "depth")?,
        None => 3,
    };
    if width == 0 || height == 0 {
        return Err(err(&doc, size, "image width and height must be positive"));
    }

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child(&doc, obj, "name")?.text().unwrap_or("").to_string();
        let difficult = match opt_text(obj, "difficult").map(str::trim) {
            None | Some("") | Some("0") => false,
            Some("1") => true,
            Some(other) => {
                return Err(err(&doc, child(&doc, obj, "difficult")?, format!("invalid flag {other:?}")))
            }
        };
        let bndbox = child(&doc, obj, "bndbox")?;
        let xmin: f64 = number(&doc, bndbox, "xmin")?;
        let ymin: f64 = number(&doc, bndbox, "ymin")?;
        let xmax: f64 = number(&doc, bndbox, "xmax")?;
        let ymax: f64 = number(&doc, bndbox, "ymax")?;
        let raw = BBox::new(xmin, ymin, xmax, ymax)
            .map_err(|_| err(&doc, bndbox, format!("degenerate box ({xmin}, {ymin}, {xmax}, {ymax})")))?;
        let bbox = clip_box(&raw, width, height)
            .ok_or_else(|| err(&doc, bndbox, "box lies outside the image"))?;
        if bbox != raw {
            log::warn!("clipped {name:?} box {raw:?} to the {width}x{height} image");
        }
        objects.push(AnnotatedObject { name, bbox, difficult });
    }
    Ok(Annotation {
        filename,
        width,
        height,
        depth,
        objects,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Writes the annotation; coordinates use the shortest exact decimal form.
pub fn serialize_voc_xml(a: &Annotation) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(&a.filename));
    let _ = writeln!(
        s,
        "\t<size>\n\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>{}</depth>\n\t</size>",
        a.width, a.height, a.depth
    );
    for o in &a.objects {
        let _ = writeln!(
            s,
            "\t<object>\n\t\t<name>{}</name>\n\t\t<difficult>{}</difficult>\n\t\t<bndbox>\n\
             \t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\
             \t\t</bndbox>\n\t</object>",
            escape(&o.name),
            u8::from(o.difficult),
            o.bbox.x_min,
            o.bbox.y_min,
            o.bbox.x_max,
            o.bbox.y_max
        );
    }
    s.push_str("</annotation>\n");
    s
}
