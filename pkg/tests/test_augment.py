from pathlib import Path

import pytest

from visual_wsd.augment import (
    PROMPT_HEADER,
    AugmentationCache,
    HttpTextService,
    TranslationCache,
    augment_batch,
    augment_context,
    build_prompt,
    parse_definitions,
    translate_context,
)
from visual_wsd.errors import (
    AugmentationUnavailableError,
    InputValidationError,
    ParseError,
    ResponseParseError,
    TranslationUnavailableError,
)
from visual_wsd.testkit import MockInferenceServer, MockTextService


def test_prompt_layout():
    prompt = build_prompt(["baseball bat", "river bank"])
    assert prompt.splitlines() == [PROMPT_HEADER, "baseball bat", "river bank"]


def test_prompt_rejects_bad_input():
    with pytest.raises(InputValidationError):
        build_prompt([])
    with pytest.raises(InputValidationError):
        build_prompt(["two\nlines"])


def test_prompt_and_parse_round_trip():
    """50 synthetic contexts survive build_prompt -> answer -> parse_definitions."""
    definitions = {f"context {k}": f"definition number {k}, with: a colon" for k in range(50)}
    prompt = build_prompt(list(definitions))
    answer = "\n".join(f"{line}: {definitions[line]}" for line in prompt.splitlines()[1:])
    assert parse_definitions(answer, list(definitions)) == definitions


def test_parse_is_case_insensitive_and_ignores_noise():
    answer = "Sure, here you go:\n\nBaseball Bat: a club used in baseball\nunrelated: line\n"
    parsed = parse_definitions(answer, ["baseball bat", "river bank"])
    assert parsed == {"baseball bat": "a club used in baseball"}


def test_parse_splits_at_first_matching_separator():
    """A context containing ': ' is still matched as a whole."""
    answer = "ratio: 3: a comparison of two numbers"
    assert parse_definitions(answer, ["ratio: 3"]) == {"ratio: 3": "a comparison of two numbers"}


def test_parse_failures_keep_the_raw_response():
    with pytest.raises(ResponseParseError):
        parse_definitions("   ", ["baseball bat"])
    with pytest.raises(ResponseParseError) as excinfo:
        parse_definitions("nothing relevant here", ["baseball bat"])
    assert excinfo.value.raw == "nothing relevant here"


def test_augment_context_form_and_idempotence(tmp_path: Path, make_instance):
    """The augmented context is `context: definition`."""
    cache = AugmentationCache(tmp_path / "definitions.tsv")
    cache.put("baseball bat", "a club used for hitting a ball in baseball")
    instance = make_instance(focus_word="bat", context="baseball bat")

    augmented = augment_context(instance, cache)
    assert augmented.augmented_context == "baseball bat: a club used for hitting a ball in baseball"
    assert augmented.context == "baseball bat"
    assert augment_context(augmented, cache) == augmented


def test_augment_cache_miss_without_service(tmp_path: Path, make_instance):
    cache = AugmentationCache(tmp_path / "definitions.tsv")
    with pytest.raises(AugmentationUnavailableError):
        augment_context(make_instance(), cache)


def test_augment_batch_calls_service_once_per_batch(tmp_path: Path, make_instance):
    service = MockTextService()
    cache = AugmentationCache(tmp_path / "definitions.tsv")
    instances = [make_instance(focus_word="bank", context=f"bank {k}") for k in range(45)]

    augmented = augment_batch(instances, cache, service, batch_size=20)
    assert service.calls == 3
    assert [a.augmented_context for a in augmented] == [
        f"bank {k}: a mock definition of bank {k}." for k in range(45)
    ]

    reloaded = AugmentationCache(tmp_path / "definitions.tsv")
    assert len(reloaded) == 45
    augment_batch(instances, reloaded, service, batch_size=20)
    assert service.calls == 3


def test_text_cache_first_value_wins_and_cleans(tmp_path: Path):
    cache = AugmentationCache(tmp_path / "definitions.tsv")
    assert cache.put("bank", "first\tvalue\nwith breaks") == "first value with breaks"
    assert cache.put("bank", "second") == "first value with breaks"
    with pytest.raises(InputValidationError):
        cache.put("empty", "  ")


def test_translate_context_keeps_provenance(tmp_path: Path, make_instance):
    cache = TranslationCache.in_dir(tmp_path, "it")
    service = MockTextService()
    instance = make_instance(focus_word="banca", context="banca del fiume", language="it")

    translated = translate_context(instance, cache, service=service)
    assert translated.context == "banca del fiume [it>en]"
    assert translated.original_context == "banca del fiume"
    assert translated.language == "it"
    assert (tmp_path / "it-en.tsv").exists()

    assert translate_context(translated, cache, service=service) == translated
    again = translate_context(instance, TranslationCache.in_dir(tmp_path, "it"))
    assert again == translated
    assert service.calls == 1


def test_translation_recomputes_focus_flag(tmp_path: Path, make_instance):
    cache = TranslationCache.in_dir(tmp_path, "it")
    cache.put("banca del fiume", "river bank")
    translated = translate_context(make_instance(focus_word="banca", context="banca del fiume", language="it"), cache)
    assert translated.context == "river bank"
    assert translated.focus_not_in_context


def test_english_is_not_translated(tmp_path: Path, make_instance):
    instance = make_instance()
    assert translate_context(instance, TranslationCache.in_dir(tmp_path, "en")) is instance


def test_translation_miss_without_service(tmp_path: Path, make_instance):
    with pytest.raises(TranslationUnavailableError):
        translate_context(make_instance(language="fa"), TranslationCache.in_dir(tmp_path, "fa"))


def test_http_text_service_against_mock_server(mock_server: MockInferenceServer):
    service = HttpTextService(mock_server.url, backoff=0.0)
    answer = service.generate(build_prompt(["baseball bat"]))
    assert parse_definitions(answer, ["baseball bat"]) == {"baseball bat": "a mock definition of baseball bat."}
    assert service.translate("banca", "it") == "banca [it>en]"
    assert service.calls == 2


def test_text_cache_reads_crlf_and_rejects_bad_bytes(tmp_path: Path):
    path = tmp_path / "definitions.tsv"
    path.write_bytes(b"river bank\tland beside a river\r\n")
    assert AugmentationCache(path).get("river bank") == "land beside a river"

    path.write_bytes(b"caf\xe9\tcoffee shop\n")
    with pytest.raises(ParseError, match="UTF-8"):
        AugmentationCache(path)
