//! Syntax-tree preparation of C/C++ sources: parsing, function-name
//! obfuscation, and comment extraction/removal.
//!
//! Obfuscation captures names with the S-expression queries shipped in
//! `queries/` (function-definition declarators and call-expression callees)
//! and rewrites every matching identifier token to a seeded `func_<16 hex>`
//! replacement. The same original always maps to the same replacement, and
//! replacements never collide with names already present in the source.
//! Comments are removed by byte-range deletion so repeated comment text
//! elsewhere in the file is untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tree_sitter::{Node, Parser, Query, QueryCursor};

use crate::corpus::LanguageTag;

/// Query capturing function-definition declarators and call-expression
/// callees (`@func-def`, `@call-expr`).
pub const FUNCTION_NAME_QUERY: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/queries/function_names.scm"));

/// Query capturing comment nodes (`@comment`).
pub const COMMENT_QUERY: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/queries/comments.scm"));

/// Query capturing declarator identifiers for the optional variable-renaming
/// mode (`@var-decl`).
pub const VARIABLE_QUERY: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/queries/variables.scm"));

#[derive(Debug, Error)]
pub enum CodeprepError {
    #[error("could not generate a fresh replacement for {name:?} after {attempts} attempts")]
    ReplacementExhausted { name: String, attempts: u32 },
}

fn ts_language(tag: LanguageTag) -> tree_sitter::Language {
    match tag {
        LanguageTag::C => tree_sitter_c::language(),
        LanguageTag::Cpp => tree_sitter_cpp::language(),
    }
}

/// A parsed source file. Owns both the tree and the text it was parsed from.
pub struct SyntaxTree {
    tree: tree_sitter::Tree,
    source: String,
    language: LanguageTag,
}

/// Parse `source` with the tree-sitter grammar for `language`.
///
/// Never fails: syntactically broken regions surface as error-kind nodes in
/// the returned tree.
pub fn parse(source: &str, language: LanguageTag) -> SyntaxTree {
    let mut parser = Parser::new();
    parser
        .set_language(&ts_language(language))
        .expect("bundled grammar must load");
    let tree = parser
        .parse(source, None)
        .expect("tree-sitter returns a tree for any input");
    SyntaxTree {
        tree,
        source: source.to_string(),
        language,
    }
}

impl SyntaxTree {
    pub fn root(&self) -> Node<'_> {
        self.tree.root_node()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn language(&self) -> LanguageTag {
        self.language
    }

    /// Node kinds in preorder. Identifier renames leave this sequence
    /// unchanged; structural edits do not.
    pub fn preorder_kinds(&self) -> Vec<&'static str> {
        let mut kinds = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            kinds.push(node.kind());
            for i in (0..node.child_count()).rev() {
                stack.push(node.child(i).expect("child index in range"));
            }
        }
        kinds
    }

    pub fn has_error_nodes(&self) -> bool {
        self.root().has_error()
    }

    pub fn error_node_count(&self) -> usize {
        let mut count = 0;
        self.walk_nodes(|node| {
            if node.is_error() || node.is_missing() {
                count += 1;
            }
        });
        count
    }

    pub fn comment_node_count(&self) -> usize {
        let mut count = 0;
        self.walk_nodes(|node| {
            if node.kind() == "comment" {
                count += 1;
            }
        });
        count
    }

    /// Text of every node whose kind names an identifier token
    /// (`identifier`, `field_identifier`, `type_identifier`, ...).
    pub fn identifier_texts(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        self.walk_nodes(|node| {
            if node.kind().ends_with("identifier") && node.child_count() == 0 {
                if let Ok(text) = node.utf8_text(self.source.as_bytes()) {
                    names.insert(text.to_string());
                }
            }
        });
        names
    }

    fn walk_nodes(&self, mut f: impl FnMut(Node<'_>)) {
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            f(node);
            for i in (0..node.child_count()).rev() {
                stack.push(node.child(i).expect("child index in range"));
            }
        }
    }

    fn capture_ranges(&self, query_src: &str) -> Vec<(Range<usize>, String)> {
        let query = Query::new(&ts_language(self.language), query_src)
            .expect("bundled query must compile for both grammars");
        let mut cursor = QueryCursor::new();
        let bytes = self.source.as_bytes();
        let mut out = Vec::new();
        for m in cursor.matches(&query, self.root(), bytes) {
            for capture in m.captures {
                let range = capture.node.byte_range();
                let text = capture
                    .node
                    .utf8_text(bytes)
                    .unwrap_or_default()
                    .to_string();
                out.push((range, text));
            }
        }
        out.sort_by_key(|(r, _)| (r.start, r.end));
        out.dedup();
        out
    }
}

/// Names captured at function-definition declarators and call-expression
/// callees, mirroring the two capture patterns of [`FUNCTION_NAME_QUERY`].
pub fn extract_identifiers(tree: &SyntaxTree) -> BTreeSet<String> {
    tree.capture_ranges(FUNCTION_NAME_QUERY)
        .into_iter()
        .map(|(_, text)| text)
        .collect()
}

/// Injective original → replacement mapping produced by [`obfuscate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenameMap {
    entries: BTreeMap<String, String>,
    seed: u64,
}

impl RenameMap {
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replacement(&self, original: &str) -> Option<&str> {
        self.entries.get(original).map(String::as_str)
    }

    pub fn is_injective(&self) -> bool {
        let values: BTreeSet<&String> = self.entries.values().collect();
        values.len() == self.entries.len()
    }

    /// Rewrite every identifier token of `source` that matches an entry.
    /// Applying the same map to its own output is a no-op, since no original
    /// name survives the first application.
    pub fn apply(&self, source: &str, language: LanguageTag) -> String {
        let tree = parse(source, language);
        let mut edits: Vec<(Range<usize>, &str)> = Vec::new();
        tree.walk_nodes(|node| {
            if node.kind() == "identifier" && node.child_count() == 0 {
                if let Ok(text) = node.utf8_text(source.as_bytes()) {
                    if let Some(replacement) = self.replacement(text) {
                        edits.push((node.byte_range(), replacement));
                    }
                }
            }
        });
        splice(source, edits)
    }
}

fn splice(source: &str, mut edits: Vec<(Range<usize>, &str)>) -> String {
    edits.sort_by_key(|(r, _)| r.start);
    edits.dedup_by_key(|(r, _)| r.clone());
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0;
    for (range, replacement) in edits {
        out.push_str(&source[cursor..range.start]);
        out.push_str(replacement);
        cursor = range.end;
    }
    out.push_str(&source[cursor..]);
    out
}

const REPLACEMENT_ATTEMPTS: u32 = 64;

/// Assign a fresh `func_<16 hex>` replacement to every name, in sorted
/// order, from a PRNG seeded with `seed`. Replacements colliding with
/// `existing` identifiers or with each other are regenerated, bounded by
/// [`REPLACEMENT_ATTEMPTS`].
pub fn build_rename_map(
    names: &BTreeSet<String>,
    existing: &BTreeSet<String>,
    seed: u64,
) -> Result<RenameMap, CodeprepError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    let mut used: BTreeSet<String> = BTreeSet::new();

    for name in names {
        let mut assigned = None;
        for _ in 0..REPLACEMENT_ATTEMPTS {
            let candidate = format!("func_{:016x}", rng.gen::<u64>());
            if existing.contains(&candidate) || used.contains(&candidate) {
                continue;
            }
            assigned = Some(candidate);
            break;
        }
        let replacement = assigned.ok_or_else(|| CodeprepError::ReplacementExhausted {
            name: name.clone(),
            attempts: REPLACEMENT_ATTEMPTS,
        })?;
        used.insert(replacement.clone());
        entries.insert(name.clone(), replacement);
    }
    Ok(RenameMap { entries, seed })
}

fn captured_names(tree: &SyntaxTree, rename_variables: bool) -> BTreeSet<String> {
    let mut names = extract_identifiers(tree);
    if rename_variables {
        for (_, text) in tree.capture_ranges(VARIABLE_QUERY) {
            names.insert(text);
        }
    }
    names
}

/// Replace captured function names (and, when `rename_variables` is set,
/// declarator identifiers) with seeded `func_<16 hex>` strings.
///
/// Deterministic for a fixed `(source, seed)`: names are assigned
/// replacements in sorted order from a seeded PRNG. Only identifier tokens
/// are rewritten; a name occurring inside a string literal or a comment is
/// left alone, since those bytes are not identifier nodes.
pub fn obfuscate(
    source: &str,
    language: LanguageTag,
    seed: u64,
    rename_variables: bool,
) -> Result<(String, RenameMap), CodeprepError> {
    let tree = parse(source, language);
    let names = captured_names(&tree, rename_variables);
    let existing = tree.identifier_texts();
    let map = build_rename_map(&names, &existing, seed)?;
    let rewritten = map.apply(source, language);
    Ok((rewritten, map))
}

/// Obfuscate a vulnerable/repaired pair with one shared map built from the
/// union of both sources' captured names, so a function keeps the same
/// replacement on both sides of the pair.
pub fn obfuscate_pair(
    vulnerable: &str,
    repaired: &str,
    language: LanguageTag,
    seed: u64,
    rename_variables: bool,
) -> Result<(String, String, RenameMap), CodeprepError> {
    let vuln_tree = parse(vulnerable, language);
    let fixed_tree = parse(repaired, language);
    let mut names = captured_names(&vuln_tree, rename_variables);
    names.extend(captured_names(&fixed_tree, rename_variables));
    let mut existing = vuln_tree.identifier_texts();
    existing.extend(fixed_tree.identifier_texts());
    let map = build_rename_map(&names, &existing, seed)?;
    Ok((
        map.apply(vulnerable, language),
        map.apply(repaired, language),
        map,
    ))
}

/// One comment and where it sits in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comment {
    pub byte_range: Range<usize>,
    pub text: String,
}

/// Every comment node of a source file, range-keyed so identical text at
/// different positions stays distinct.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommentSet {
    pub comments: Vec<Comment>,
}

impl CommentSet {
    pub fn len(&self) -> usize {
        self.comments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comments.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.comments.iter().map(|c| c.byte_range.len()).sum()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.comments.iter().map(|c| c.text.as_str()).collect()
    }
}

/// Collect every comment node of `source`.
pub fn extract_comments(source: &str, language: LanguageTag) -> CommentSet {
    let tree = parse(source, language);
    let comments = tree
        .capture_ranges(COMMENT_QUERY)
        .into_iter()
        .map(|(byte_range, text)| Comment { byte_range, text })
        .collect();
    CommentSet { comments }
}

/// Delete every comment from `source` by byte range.
///
/// Idempotent; the output parses with zero comment nodes and its length is
/// the input length minus the summed comment-range lengths.
pub fn strip_comments(source: &str, language: LanguageTag) -> String {
    let set = extract_comments(source, language);
    let edits = set
        .comments
        .iter()
        .map(|c| (c.byte_range.clone(), ""))
        .collect();
    splice(source, edits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_function() {
        let tree = parse("int f(){return 0;}", LanguageTag::C);
        let kinds = tree.preorder_kinds();
        assert!(kinds.contains(&"function_definition"));
        assert!(!tree.has_error_nodes());
    }

    #[test]
    fn parse_empty_source() {
        let tree = parse("", LanguageTag::C);
        assert_eq!(tree.root().child_count(), 0);
        assert!(!tree.has_error_nodes());
    }

    #[test]
    fn parse_malformed_input_yields_error_nodes() {
        let tree = parse("int f({", LanguageTag::C);
        assert!(tree.has_error_nodes());
        assert!(tree.error_node_count() >= 1);
    }

    #[test]
    fn extract_identifiers_definition_and_call() {
        let tree = parse("void a(){b();}", LanguageTag::C);
        let names = extract_identifiers(&tree);
        assert_eq!(names, BTreeSet::from(["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn extract_identifiers_no_functions() {
        let tree = parse("int x = 5;", LanguageTag::C);
        assert!(extract_identifiers(&tree).is_empty());
    }

    #[test]
    fn extract_identifiers_matches_manual_walk_on_fixture() {
        // oracle: hand-walk the tree for function_definition declarators and
        // call-expression callees, independent of the query machinery
        let source = "int helper(int x) { return x; }\n\
                      int main() { int y = helper(2); dispatch(y); return y; }\n";
        let tree = parse(source, LanguageTag::Cpp);
        let mut expected = BTreeSet::new();
        let mut stack = vec![tree.root()];
        while let Some(node) = stack.pop() {
            if node.kind() == "function_definition" {
                if let Some(decl) = node.child_by_field_name("declarator") {
                    if decl.kind() == "function_declarator" {
                        if let Some(name) = decl.child_by_field_name("declarator") {
                            if name.kind() == "identifier" {
                                expected.insert(
                                    name.utf8_text(source.as_bytes()).unwrap().to_string(),
                                );
                            }
                        }
                    }
                }
            }
            if node.kind() == "call_expression" {
                if let Some(callee) = node.child_by_field_name("function") {
                    if callee.kind() == "identifier" {
                        expected
                            .insert(callee.utf8_text(source.as_bytes()).unwrap().to_string());
                    }
                }
            }
            for i in 0..node.child_count() {
                stack.push(node.child(i).unwrap());
            }
        }
        assert_eq!(extract_identifiers(&tree), expected);
        assert!(expected.contains("helper"));
        assert!(expected.contains("dispatch"));
        assert!(expected.contains("main"));
    }

    #[test]
    fn obfuscate_repeated_names_share_one_replacement() {
        let source = "void a(){a_helper(); a_helper();}";
        let (out, map) = obfuscate(source, LanguageTag::C, 11, false).unwrap();
        let replacement = map.replacement("a_helper").unwrap();
        assert_eq!(out.matches(replacement).count(), 2);
        assert!(!out.contains("a_helper"));
    }

    #[test]
    fn obfuscate_is_deterministic() {
        let source = "void a(){b(); c();}";
        let (out1, map1) = obfuscate(source, LanguageTag::C, 3, false).unwrap();
        let (out2, map2) = obfuscate(source, LanguageTag::C, 3, false).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(map1, map2);
        let (out3, _) = obfuscate(source, LanguageTag::C, 4, false).unwrap();
        assert_ne!(out1, out3);
    }

    #[test]
    fn obfuscate_replacements_match_surface_form() {
        let source = "void alpha(){beta();}";
        let (_, map) = obfuscate(source, LanguageTag::C, 9, false).unwrap();
        for replacement in map.entries().values() {
            let hex = replacement.strip_prefix("func_").unwrap();
            assert_eq!(hex.len(), 16);
            assert!(hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()));
        }
        assert!(map.is_injective());
    }

    #[test]
    fn obfuscate_preserves_node_kind_sequence() {
        let dir = crate::fixtures::microcorpus_dir();
        let outcome =
            crate::corpus::ingest_pairs(&dir, &dir.join("labels.csv")).unwrap();
        for pair in outcome.corpus.pairs() {
            for source in [&pair.vulnerable_source, &pair.repaired_source] {
                let before = parse(source, pair.language_tag).preorder_kinds();
                let (out, _) = obfuscate(source, pair.language_tag, 7, false).unwrap();
                let after = parse(&out, pair.language_tag).preorder_kinds();
                assert_eq!(before, after, "kind sequence changed for {}", pair.id);
            }
        }
    }

    #[test]
    fn obfuscate_pair_shares_one_map() {
        let vuln = "void copy_name(char *s){ strcpy(buf, s); }";
        let fixed = "void copy_name(char *s){ strncpy(buf, s, 15); }";
        let (v, f, map) = obfuscate_pair(vuln, fixed, LanguageTag::C, 7, false).unwrap();
        let renamed = map.replacement("copy_name").unwrap();
        assert!(v.contains(renamed) && f.contains(renamed));
        assert!(map.replacement("strcpy").is_some());
        assert!(map.replacement("strncpy").is_some());
        assert!(!v.contains("copy_name") && !f.contains("copy_name"));
    }

    #[test]
    fn rename_map_apply_is_idempotent_in_effect() {
        let source = "void a(){b(); a();}";
        let (once, map) = obfuscate(source, LanguageTag::C, 21, false).unwrap();
        let twice = map.apply(&once, LanguageTag::C);
        assert_eq!(once, twice);
    }

    #[test]
    fn obfuscate_with_variable_renaming() {
        let source = "int f(int count){int total = count; return total;}";
        let (out, map) = obfuscate(source, LanguageTag::C, 5, true).unwrap();
        assert!(map.replacement("total").is_some());
        assert!(map.replacement("count").is_some());
        assert!(!out.contains("total"));
        assert!(!out.contains("count"));
        // structure is still intact
        assert_eq!(
            parse(source, LanguageTag::C).preorder_kinds(),
            parse(&out, LanguageTag::C).preorder_kinds()
        );
    }

    #[test]
    fn extract_comments_line_comment() {
        let set = extract_comments("int x; // hi", LanguageTag::C);
        assert_eq!(set.len(), 1);
        assert_eq!(set.comments[0].text, "// hi");
    }

    #[test]
    fn extract_comments_identical_text_distinct_ranges() {
        let set = extract_comments("/*a*/ int x; /*a*/", LanguageTag::C);
        assert_eq!(set.len(), 2);
        assert_eq!(set.comments[0].text, set.comments[1].text);
        assert_ne!(set.comments[0].byte_range, set.comments[1].byte_range);
    }

    #[test]
    fn extract_comments_comment_free() {
        assert!(extract_comments("int x;", LanguageTag::C).is_empty());
    }

    #[test]
    fn strip_comments_line_comment() {
        assert_eq!(strip_comments("int x; // hi", LanguageTag::C), "int x; ");
    }

    #[test]
    fn strip_comments_is_idempotent() {
        let source = "/* head */ int x; // tail\nint y; /* mid */ int z;";
        let once = strip_comments(source, LanguageTag::C);
        let twice = strip_comments(&once, LanguageTag::C);
        assert_eq!(once, twice);
        assert_eq!(parse(&once, LanguageTag::C).comment_node_count(), 0);
    }

    #[test]
    fn strip_comments_leaves_identifiers_alone() {
        // comment text that also appears inside an identifier must survive
        assert_eq!(
            strip_comments("/*a*/int a_var;/*a*/", LanguageTag::C),
            "int a_var;"
        );
    }

    #[test]
    fn strip_comments_byte_accounting() {
        let source = "int x; /* one */ int y; // two";
        let set = extract_comments(source, LanguageTag::C);
        let stripped = strip_comments(source, LanguageTag::C);
        assert_eq!(stripped.len(), source.len() - set.total_bytes());
    }

    #[test]
    fn query_files_match_expected_captures() {
        assert!(FUNCTION_NAME_QUERY.contains("function_definition"));
        assert!(FUNCTION_NAME_QUERY.contains("@func-def"));
        assert!(FUNCTION_NAME_QUERY.contains("call_expression"));
        assert!(FUNCTION_NAME_QUERY.contains("@call-expr"));
        assert!(COMMENT_QUERY.contains("(comment) @comment"));
    }
}
