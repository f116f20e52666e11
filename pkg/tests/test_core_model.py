import json
import re

import pytest
from hypothesis import given, strategies as st

from vivecap.core_model import (
    CharacterEntry,
    DatasetManifest,
    Frame,
    MalformedJson,
    MissingKey,
    Roster,
    StructuredCaption,
    UniversalCheckConfig,
    WrongShape,
    caption_token_count,
    collapse_to_dense,
    extract_characters,
    parse_structured_caption,
    serialize_caption,
    validate_structured_caption,
)

from conftest import FIG_CAPTION_RAW

EMPTY_RAW = '{"scene":"","background":"","characters":{},"salient_objects":{}}'


class TestParse:
    def test_reference_misaligned_caption(self):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        assert set(c.characters) == {"Victoria"}
        assert c.salient_objects == {}
        assert c.characters["Victoria"].location == "Center of the image"

    def test_minimal_schema_instance(self):
        c = parse_structured_caption(EMPTY_RAW)
        assert c == StructuredCaption(scene="", background="")

    def test_fenced_input_matches_unfenced(self):
        fenced = "```json\n" + FIG_CAPTION_RAW + "\n```"
        # oracle: strip the fence by hand and re-parse
        manual = re.sub(r"^```json\n|\n```$", "", fenced)
        assert parse_structured_caption(fenced) == parse_structured_caption(manual)

    def test_malformed_json_keeps_raw_and_offset(self):
        raw = '{"scene": "x", '
        with pytest.raises(MalformedJson) as exc:
            parse_structured_caption(raw)
        assert exc.value.raw == raw
        assert exc.value.offset > 0

    def test_missing_key(self):
        with pytest.raises(MissingKey) as exc:
            parse_structured_caption('{"scene":"","background":"","characters":{}}')
        assert exc.value.name == "salient_objects"

    def test_extra_key_rejected(self):
        raw = EMPTY_RAW[:-1] + ',"mood":"tense"}'
        with pytest.raises(WrongShape):
            parse_structured_caption(raw)

    def test_empty_string_sections_coerced_to_maps(self):
        raw = '{"scene":"s","background":"b","characters":"","salient_objects":""}'
        c = parse_structured_caption(raw)
        assert c.characters == {} and c.salient_objects == {}

    def test_wrong_shape_in_entry(self):
        raw = '{"scene":"","background":"","characters":{"Ellie":"tall"},"salient_objects":{}}'
        with pytest.raises(WrongShape) as exc:
            parse_structured_caption(raw)
        assert "Ellie" in exc.value.path


class TestValidate:
    def test_reference_caption_is_adherent(self, roster):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        assert validate_structured_caption(c, roster) == []

    def test_non_roster_name_reported(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={"Bob": CharacterEntry("", "", "", "")},
        )
        report = validate_structured_caption(c, roster)
        assert any(v.kind == "unknown_character" and v.subject == "Bob" for v in report)

    def test_duplicate_after_casefold(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={
                "ellie": CharacterEntry("", "", "", ""),
                "Ellie": CharacterEntry("", "", "", ""),
            },
        )
        report = validate_structured_caption(c, roster)
        # oracle: 'ellie'.casefold() == 'Ellie'.casefold()
        assert any(v.kind == "duplicate_name" for v in report)

    def test_unknown_character_literal_allowed(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={"Unknown Character": CharacterEntry("", "", "", "")},
        )
        assert validate_structured_caption(c, roster) == []

    def test_missing_entry_field_reported(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={"Ellie": CharacterEntry(description="x", location="y", expression="z")},
        )
        report = validate_structured_caption(c, roster)
        assert any(v.kind == "missing_field" and v.detail == "pose" for v in report)


class TestTokenCount:
    def test_empty_caption_far_below_limit(self):
        c = parse_structured_caption(EMPTY_RAW)
        # oracle: independent whitespace split of the serialization
        expected = len(serialize_caption(c).split())
        count, too_long = caption_token_count(c)
        assert count == expected
        assert not too_long

    def test_boundary_is_inclusive(self):
        c = parse_structured_caption(EMPTY_RAW)
        base, _ = caption_token_count(c)
        scene = " ".join(["word"] * (1024 - base + 1))
        padded = StructuredCaption(scene=scene, background="")
        count, too_long = caption_token_count(padded)
        assert count >= 1024
        assert too_long
        cfg = UniversalCheckConfig(max_caption_tokens=count)
        assert caption_token_count(padded, cfg) == (count, True)

    def test_reference_caption_not_too_long(self):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        expected = len(serialize_caption(c).split())
        count, too_long = caption_token_count(c)
        assert (count, too_long) == (expected, False)

    def test_bytes_rule(self):
        c = parse_structured_caption(EMPTY_RAW)
        cfg = UniversalCheckConfig(tokenization_rule="bytes")
        count, _ = caption_token_count(c, cfg)
        assert count == len(serialize_caption(c).encode("utf-8"))

    def test_appending_token_never_decreases_count(self):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        before, _ = caption_token_count(c)
        longer = StructuredCaption(
            scene=c.scene + " extra", background=c.background,
            characters=c.characters, salient_objects=c.salient_objects,
        )
        after, _ = caption_token_count(longer)
        assert after >= before


class TestCollapse:
    def test_empty_caption_collapses_to_empty(self):
        c = parse_structured_caption(EMPTY_RAW)
        assert collapse_to_dense(c) == ""

    def test_ordering_character_before_object(self):
        c = StructuredCaption(
            scene="A clearing.",
            background="Night forest.",
            characters={"Ellie": CharacterEntry("brave", "center", "calm", "standing")},
            salient_objects={"knife": "red handle"},
        )
        # oracle: explicit template fill by hand
        expected = (
            "A clearing. Night forest. "
            "Ellie: brave (location: center; expression: calm; pose: standing) "
            "knife: red handle"
        )
        assert collapse_to_dense(c) == expected

    def test_deterministic(self):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        assert collapse_to_dense(c) == collapse_to_dense(c)


class TestExtractCharacters:
    def test_reference_caption(self, roster):
        c = parse_structured_caption(FIG_CAPTION_RAW)
        assert extract_characters(c, roster) == frozenset({"Victoria"})

    def test_empty_map(self, roster):
        c = parse_structured_caption(EMPTY_RAW)
        assert extract_characters(c, roster) == frozenset()

    def test_unknown_character_excluded(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={
                "Ellie": CharacterEntry("", "", "", ""),
                "Unknown Character": CharacterEntry("", "", "", ""),
            },
        )
        assert extract_characters(c, roster) == frozenset({"Ellie"})

    def test_case_normalized_to_roster(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={"elder_sprite": CharacterEntry("", "", "", "")},
        )
        assert extract_characters(c, roster) == frozenset({"Elder_Sprite"})

    def test_always_subset_of_roster(self, roster):
        c = StructuredCaption(
            scene="", background="",
            characters={"Gandalf": CharacterEntry("", "", "", "")},
        )
        assert extract_characters(c, roster) <= frozenset(roster.names)


safe_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40
)
names = st.text(
    alphabet=st.characters(whitelist_categories=("Lu", "Ll"), max_codepoint=0x2FF),
    min_size=1, max_size=12,
)
entries = st.builds(CharacterEntry, safe_text, safe_text, safe_text, safe_text)
captions = st.builds(
    StructuredCaption,
    scene=safe_text,
    background=safe_text,
    characters=st.dictionaries(names, entries, max_size=4),
    salient_objects=st.dictionaries(names, safe_text, max_size=4),
)


@given(captions)
def test_round_trip_property(c):
    assert parse_structured_caption(serialize_caption(c)) == c


@given(captions)
def test_collapse_total_and_deterministic(c):
    assert collapse_to_dense(c) == collapse_to_dense(c)


def test_roster_invariants():
    with pytest.raises(ValueError):
        Roster(())
    with pytest.raises(ValueError):
        Roster(("Ellie", "ellie"))
    with pytest.raises(ValueError):
        Roster(("  ",))


def test_manifest_key_resolution():
    frame = Frame(id="a", image_path="x.png")
    with pytest.raises(ValueError):
        DatasetManifest(frames=[frame], labels={"b": None})
