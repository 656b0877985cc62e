//! Linear prompt serialization: schema block, auxiliary block (descriptions,
//! content values, hint), question and few-shot demonstrations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::ContentMatchSet;
use crate::schema::{DatabaseSchema, QuestionTask};
use crate::selection::{restrict_schema, SelectionSet};

pub const TASK_HEADER: &str = "This is a task converting text into SQL statement. We will first given the dataset schema and then ask a question in text. You are asked to generate SQL statement.";
pub const DEMO_PREFIX: &str = "Here is an example:";
pub const TEST_PREFIX: &str = "Here is the test question to be answered:";
pub const CONCISE_LEAD: &str = "Convert text to SQL:";
pub const SQL_MARKER: &str = "[SQL]:";
pub const VERBOSE_SQL_MARKER: &str = "The corresponding SQL is:";
pub const CONTENT_HEADER: &str = "[Database values that related with questions]:";
pub const DESCRIPTION_HEADER: &str = "[detailed description of tables and columns]:";
pub const HINT_HEADER: &str = "[Additional Info]:";
const VERBOSE_LEAD: &str = "Let us take a question and turn it into a SQL statement about database tables.";
const VERBOSE_QUESTION_LEAD: &str =
    "Let us take a text question and turn it into a SQL statement about database tables. The question is:";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("style requests content values but no content match set was supplied")]
    MissingContent,
    #[error("style requests selected descriptions or hard selection but no selection was supplied")]
    MissingSelection,
    #[error("hard selection is empty")]
    EmptySelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Concise,
    Verbose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionMode {
    None,
    Selected,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptStyle {
    pub mode: PromptMode,
    pub include_data_types: bool,
    pub include_descriptions: DescriptionMode,
    pub include_content_values: bool,
    pub include_hint: bool,
    /// Lowercase table/column names in the schema and key blocks.
    pub lowercase_identifiers: bool,
    /// Filter the schema block to the selection.
    pub hard_selection: bool,
}

impl Default for PromptStyle {
    fn default() -> Self {
        PromptStyle {
            mode: PromptMode::Concise,
            include_data_types: true,
            include_descriptions: DescriptionMode::None,
            include_content_values: false,
            include_hint: true,
            lowercase_identifiers: false,
            hard_selection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub x1: String,
    pub x2: String,
    pub question: String,
    pub demonstrations: Vec<Demonstration>,
    pub rendered: String,
}

fn concise_ident(name: &str, lowercase: bool) -> String {
    let n = if lowercase { name.to_lowercase() } else { name.to_string() };
    if n.contains([',', '|', ':']) {
        format!("`{n}`")
    } else {
        n
    }
}

fn schema_for(
    schema: &DatabaseSchema,
    style: &PromptStyle,
    selection: Option<&SelectionSet>,
) -> Result<DatabaseSchema, PromptError> {
    if !style.hard_selection {
        return Ok(schema.clone());
    }
    let selection = selection.ok_or(PromptError::MissingSelection)?;
    if selection.is_empty() {
        return Err(PromptError::EmptySelection);
    }
    Ok(restrict_schema(schema, selection))
}

fn concise_x1(schema: &DatabaseSchema, style: &PromptStyle) -> String {
    let lc = style.lowercase_identifiers;
    let id = |n: &str| concise_ident(n, lc);
    let mut tables = String::new();
    for t in &schema.tables {
        let cols: Vec<String> = t.columns.iter().map(|c| id(&c.name)).collect();
        tables.push_str(&format!(" | {} : {}", id(&t.name), cols.join(" , ")));
    }
    let mut out = format!("| {}{};", id(&schema.db_id), tables);

    if style.include_data_types {
        let typed: Vec<String> = schema
            .tables
            .iter()
            .flat_map(|t| {
                t.columns
                    .iter()
                    .map(move |c| format!("{} : {} ({})", id(&t.name), id(&c.name), c.data_type))
            })
            .collect();
        out.push_str(&format!("\n[Column names (type)]: {};", typed.join(" | ")));
    }

    let pks: Vec<String> = schema
        .tables
        .iter()
        .flat_map(|t| {
            t.primary_key_columns
                .iter()
                .map(move |&c| format!("{} : {}", id(&t.name), id(&t.columns[c].name)))
        })
        .collect();
    out.push_str(&format!("\n[Primary Keys]: {};", pks.join(" | ")));

    let fks: Vec<String> = schema
        .foreign_keys
        .iter()
        .map(|fk| {
            let (ft, tt) = (&schema.tables[fk.from_table], &schema.tables[fk.to_table]);
            format!(
                "{} : {} equals {} : {}",
                id(&ft.name),
                id(&ft.columns[fk.from_column].name),
                id(&tt.name),
                id(&tt.columns[fk.to_column].name)
            )
        })
        .collect();
    out.push_str(&format!("\n[Foreign Keys]: {};", fks.join(" | ")));
    out
}

/// Concise schema block, starting at `| db_id | table : col , ...`.
pub fn serialize_schema_concise(
    schema: &DatabaseSchema,
    style: &PromptStyle,
    selection: Option<&SelectionSet>,
) -> Result<String, PromptError> {
    Ok(concise_x1(&schema_for(schema, style, selection)?, style))
}

/// Natural-language schema rendering.
pub fn serialize_schema_verbose(schema: &DatabaseSchema, style: &PromptStyle) -> String {
    let key = |n: &str| {
        if style.lowercase_identifiers {
            n.to_lowercase()
        } else {
            n.to_string()
        }
    };
    let n = schema.tables.len();
    let titles: Vec<&str> = schema.tables.iter().map(|t| t.name.as_str()).collect();
    let mut out = String::from(VERBOSE_LEAD);
    if n == 1 {
        out.push_str(&format!(" There is 1 table. Its title is: {}.", titles[0]));
    } else {
        out.push_str(&format!(
            " There are {n} tables. Their titles are: {}.",
            titles.join(", ")
        ));
    }
    for (i, t) in schema.tables.iter().enumerate() {
        let cols: Vec<String> = t
            .columns
            .iter()
            .map(|c| {
                if style.include_data_types {
                    format!("{} (Type is {})", c.name, c.data_type)
                } else {
                    c.name.clone()
                }
            })
            .collect();
        let what = if style.include_data_types {
            "column names and types"
        } else {
            "column names"
        };
        out.push_str(&format!(
            " Table {} is {}, and its {what} are: {}.",
            i + 1,
            t.name,
            cols.join(", ")
        ));
    }
    let pks: Vec<String> = schema
        .tables
        .iter()
        .flat_map(|t| {
            t.primary_key_columns
                .iter()
                .map(move |&c| format!("{} from Table {}", key(&t.columns[c].name), t.name))
        })
        .collect();
    if !pks.is_empty() {
        out.push_str(&format!(" The primary keys are: {}.", pks.join(", ")));
    }
    if !schema.foreign_keys.is_empty() {
        let fks: Vec<String> = schema
            .foreign_keys
            .iter()
            .map(|fk| {
                let (ft, tt) = (&schema.tables[fk.from_table], &schema.tables[fk.to_table]);
                format!(
                    "{} from Table {} is equivalent with {} from Table {}",
                    key(&ft.columns[fk.from_column].name),
                    ft.name,
                    key(&tt.columns[fk.to_column].name),
                    tt.name
                )
            })
            .collect();
        out.push_str(&format!(
            " The foreign keys are: {}. Use foreign keys to join Tables.",
            fks.join(", ")
        ));
    }
    out
}

fn description_block(
    schema: &DatabaseSchema,
    mode: DescriptionMode,
    selection: Option<&SelectionSet>,
) -> Result<Option<String>, PromptError> {
    let selection = match mode {
        DescriptionMode::None => return Ok(None),
        DescriptionMode::Selected => Some(selection.ok_or(PromptError::MissingSelection)?),
        DescriptionMode::Full => None,
    };
    let mut lines = vec![DESCRIPTION_HEADER.to_string()];
    for t in &schema.tables {
        let mut table_lines = Vec::new();
        for c in &t.columns {
            if selection.is_some_and(|s| !s.contains_column(&t.name, &c.name)) {
                continue;
            }
            let desc = c.description.as_deref().filter(|d| !d.is_empty());
            let vdesc = c.value_description.as_deref().filter(|d| !d.is_empty());
            let line = match (desc, vdesc) {
                (Some(d), Some(v)) => format!(
                    "Column \"{}\" of Table \"{}\", means \"{d}\", has value descriptions \"{v}\"",
                    c.name, t.name
                ),
                (Some(d), None) => {
                    format!("Column \"{}\" of Table \"{}\", means \"{d}\"", c.name, t.name)
                }
                (None, Some(v)) => format!(
                    "Column \"{}\" of Table {} has value descriptions \"{v}\"",
                    c.name, t.name
                ),
                (None, None) => continue,
            };
            table_lines.push(line);
        }
        if !table_lines.is_empty() {
            lines.push(format!(
                "Column description of Table \"{}\" have the following descriptions:",
                t.name
            ));
            lines.extend(table_lines);
        }
    }
    if lines.len() == 1 {
        return Ok(None);
    }
    lines.push(";".into());
    Ok(Some(lines.join("\n")))
}

pub fn content_block(content: &ContentMatchSet) -> Option<String> {
    if content.is_empty() {
        return None;
    }
    let mut lines = vec![CONTENT_HEADER.to_string()];
    for (table, column, values) in content.by_column() {
        lines.push(format!(
            "The column `{column}` in Table `{table}` has database values: [{}]",
            values.join(", ")
        ));
    }
    lines.push(";".into());
    Some(lines.join("\n"))
}

fn build_x2(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    style: &PromptStyle,
    content: Option<&ContentMatchSet>,
    selection: Option<&SelectionSet>,
) -> Result<String, PromptError> {
    let mut blocks = Vec::new();
    if let Some(d) = description_block(schema, style.include_descriptions, selection)? {
        blocks.push(d);
    }
    if style.include_content_values {
        let content = content.ok_or(PromptError::MissingContent)?;
        if let Some(c) = content_block(content) {
            blocks.push(c);
        }
    }
    if style.include_hint {
        if let Some(h) = task.hint.as_deref().filter(|h| !h.trim().is_empty()) {
            blocks.push(format!("{HINT_HEADER} {h}"));
        }
    }
    Ok(blocks.join("\n"))
}

fn instance_body(style: &PromptStyle, x1: &str, x2: &str, question: &str) -> String {
    match style.mode {
        PromptMode::Concise => {
            let mut body = format!("[Schema (values)]: {x1}");
            if !x2.is_empty() {
                body.push('\n');
                body.push_str(x2);
            }
            body.push_str(&format!("\n[Q]: {question};"));
            body
        }
        PromptMode::Verbose => {
            let sep = if x2.is_empty() {
                "  ".to_string()
            } else {
                format!("\n{x2}\n")
            };
            format!("{x1}{sep}{VERBOSE_QUESTION_LEAD} {question}")
        }
    }
}

fn parts(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    style: &PromptStyle,
    content: Option<&ContentMatchSet>,
    selection: Option<&SelectionSet>,
) -> Result<(String, String), PromptError> {
    let effective = schema_for(schema, style, selection)?;
    let x1 = match style.mode {
        PromptMode::Concise => concise_x1(&effective, style),
        PromptMode::Verbose => serialize_schema_verbose(&effective, style),
    };
    let x2 = build_x2(&effective, task, style, content, selection)?;
    Ok((x1, x2))
}

/// Instance text without prefix or SQL marker; the `input` half of a
/// demonstration pair.
pub fn render_instance_body(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    style: &PromptStyle,
    content: Option<&ContentMatchSet>,
    selection: Option<&SelectionSet>,
) -> Result<String, PromptError> {
    let (x1, x2) = parts(schema, task, style, content, selection)?;
    Ok(instance_body(style, &x1, &x2, &task.question))
}

pub fn build_prompt(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    style: &PromptStyle,
    content: Option<&ContentMatchSet>,
    selection: Option<&SelectionSet>,
    demos: &[Demonstration],
) -> Result<PromptBundle, PromptError> {
    let (x1, x2) = parts(schema, task, style, content, selection)?;
    let body = instance_body(style, &x1, &x2, &task.question);
    let rendered = match style.mode {
        PromptMode::Concise => {
            let mut out = format!("{TASK_HEADER}\n\n");
            for d in demos {
                out.push_str(&format!(
                    "{DEMO_PREFIX} {CONCISE_LEAD}\n{}\n{SQL_MARKER} {}\n\n",
                    d.input, d.sql
                ));
            }
            out.push_str(&format!("{TEST_PREFIX} {CONCISE_LEAD}\n{body}\n{SQL_MARKER}"));
            out
        }
        PromptMode::Verbose => {
            let mut out = format!("{TASK_HEADER}\n");
            for d in demos {
                out.push_str(&format!(
                    "{DEMO_PREFIX} {} {VERBOSE_SQL_MARKER} {}\n",
                    d.input, d.sql
                ));
            }
            out.push_str(&format!("{TEST_PREFIX} {body} {VERBOSE_SQL_MARKER}"));
            out
        }
    };
    Ok(PromptBundle {
        x1,
        x2,
        question: task.question.clone(),
        demonstrations: demos.to_vec(),
        rendered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub fits: bool,
    pub estimated_tokens: usize,
    pub overflow_chars: usize,
}

/// Character-proxy token estimate: `ceil(chars / 4)`.
pub fn estimate_token_budget(bundle: &PromptBundle, limit: usize) -> TokenBudget {
    let chars = bundle.rendered.chars().count();
    let estimated_tokens = chars.div_ceil(4);
    TokenBudget {
        fits: estimated_tokens <= limit,
        estimated_tokens,
        overflow_chars: chars.saturating_sub(limit.saturating_mul(4)),
    }
}

/// Builds the prompt, dropping optional material until it fits: the content
/// block, then full descriptions, then demonstrations from the front. The
/// schema block and question are never cut, so the result may still overflow.
/// Returns the bundle and labels of what was dropped.
pub fn build_prompt_within_budget(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    style: &PromptStyle,
    content: Option<&ContentMatchSet>,
    selection: Option<&SelectionSet>,
    demos: &[Demonstration],
    limit: usize,
) -> Result<(PromptBundle, Vec<String>), PromptError> {
    let mut style = style.clone();
    let mut demos = demos.to_vec();
    let mut dropped = Vec::new();
    loop {
        let bundle = build_prompt(schema, task, &style, content, selection, &demos)?;
        if estimate_token_budget(&bundle, limit).fits {
            return Ok((bundle, dropped));
        }
        if style.include_content_values {
            style.include_content_values = false;
            dropped.push("content_values".into());
        } else if style.include_descriptions == DescriptionMode::Full {
            style.include_descriptions = DescriptionMode::None;
            dropped.push("descriptions".into());
        } else if !demos.is_empty() {
            demos.remove(0);
            dropped.push("demonstration".into());
        } else {
            return Ok((bundle, dropped));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnSpec, DataType, TableSchema};

    fn minimal() -> DatabaseSchema {
        DatabaseSchema {
            db_id: "db".into(),
            tables: vec![TableSchema {
                name: "t".into(),
                columns: vec![ColumnSpec {
                    table_index: 0,
                    name: "c".into(),
                    data_type: DataType::Text,
                    description: None,
                    value_description: None,
                    sample_values: vec![],
                }],
                primary_key_columns: vec![],
            }],
            foreign_keys: vec![],
            storage_path: "/nonexistent".into(),
        }
    }

    fn task(q: &str) -> QuestionTask {
        QuestionTask {
            question_id: "0".into(),
            db_id: "db".into(),
            question: q.into(),
            hint: None,
            gold_sql: None,
            difficulty: None,
        }
    }

    #[test]
    fn minimal_concise() {
        let style = PromptStyle {
            include_data_types: false,
            ..PromptStyle::default()
        };
        assert_eq!(
            serialize_schema_concise(&minimal(), &style, None).unwrap(),
            "| db | t : c;\n[Primary Keys]: ;\n[Foreign Keys]: ;"
        );
    }

    #[test]
    fn delimiter_names_are_quoted() {
        let mut s = minimal();
        s.tables[0].columns[0].name = "Percent (%), total".into();
        let out = serialize_schema_concise(&s, &PromptStyle::default(), None).unwrap();
        assert!(out.starts_with("| db | t : `Percent (%), total`;"));
    }

    #[test]
    fn single_table_verbose() {
        let out = serialize_schema_verbose(&minimal(), &PromptStyle::default());
        assert!(out.contains("There is 1 table. Its title is: t."));
        assert!(!out.contains("foreign keys"));
    }

    #[test]
    fn content_requires_matches() {
        let style = PromptStyle {
            include_content_values: true,
            ..PromptStyle::default()
        };
        assert_eq!(
            build_prompt(&minimal(), &task("q"), &style, None, None, &[]).unwrap_err(),
            PromptError::MissingContent
        );
    }

    #[test]
    fn demonstrations_counted() {
        let demos: Vec<Demonstration> = (0..4)
            .map(|i| Demonstration {
                input: format!("[Q]: q{i};"),
                sql: format!("SELECT {i};"),
            })
            .collect();
        let b = build_prompt(&minimal(), &task("q"), &PromptStyle::default(), None, None, &demos)
            .unwrap();
        assert_eq!(b.rendered.matches(DEMO_PREFIX).count(), 4);
        assert!(b.rendered.ends_with(SQL_MARKER));
        let none = build_prompt(&minimal(), &task("q"), &PromptStyle::default(), None, None, &[])
            .unwrap();
        assert!(!none.rendered.contains(DEMO_PREFIX));
    }

    #[test]
    fn budget_arithmetic() {
        let mut b = build_prompt(&minimal(), &task("q"), &PromptStyle::default(), None, None, &[])
            .unwrap();
        b.rendered = String::new();
        assert_eq!(
            estimate_token_budget(&b, 1),
            TokenBudget { fits: true, estimated_tokens: 0, overflow_chars: 0 }
        );
        b.rendered = "x".repeat(8000);
        let r = estimate_token_budget(&b, 2000);
        assert!(r.fits);
        b.rendered = "x".repeat(16000);
        let r = estimate_token_budget(&b, 2000);
        assert_eq!((r.fits, r.estimated_tokens, r.overflow_chars), (false, 4000, 8000));
        b.rendered = "x".repeat(8001);
        assert!(!estimate_token_budget(&b, 2000).fits);
    }

    #[test]
    fn budget_drops_demos_from_front() {
        let demos: Vec<Demonstration> = (0..3)
            .map(|i| Demonstration {
                input: format!("[Q]: {};", "long ".repeat(40) + &i.to_string()),
                sql: "SELECT 1;".into(),
            })
            .collect();
        let (b, dropped) = build_prompt_within_budget(
            &minimal(),
            &task("q"),
            &PromptStyle::default(),
            None,
            None,
            &demos,
            160,
        )
        .unwrap();
        assert!(!dropped.is_empty());
        assert!(dropped.iter().all(|d| d == "demonstration"));
        assert_eq!(b.demonstrations.last(), demos.last());
    }
}
