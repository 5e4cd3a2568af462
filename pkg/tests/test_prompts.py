import pytest

from zsfuse import prompts
from zsfuse.errors import EmptyLabelError, EmptyLabelSetError, ProtocolError
from zsfuse.prompts import DEFAULT_TEMPLATE, LabelTemplate

CLASSIFICATION = (
    "You are given an image and a list of class labels. Classify the image given the class labels. "
    "Answer using a single word if possible. Here are the class labels: "
)
DESCRIPTION = "What do you see? Describe any object precisely, including its type or class."


class TestBodies:
    def test_classification_exact(self):
        assert prompts.render_classification_prompt(["cat", "dog", "bird"]) == CLASSIFICATION + "cat, dog, bird"

    def test_description_exact(self):
        assert prompts.render_description_prompt() == DESCRIPTION

    def test_class_descriptions_frozen(self):
        out = prompts.render_class_description_prompts("tabby cat")
        assert out == [
            "Describe what a tabby cat looks like in one or two sentences.",
            "How can you identify a tabby cat in one or two sentences?",
            "What does a tabby cat look like? Respond with one or two sentences.",
            "Describe an image from the internet of a tabby cat. Respond with one or two sentences.",
            "A short caption of an image of a tabby cat:",
        ]

    def test_asset_version(self):
        assert prompts.asset_version() == "1"

    def test_thousand_labels_each_appear_once(self):
        labels = [f"class_{i:04d}" for i in range(1000)]
        text = prompts.render_classification_prompt(labels)
        listing = text[len(CLASSIFICATION):]
        assert listing.split(", ") == labels
        assert all(text.count(label) == 1 for label in labels)

    def test_braces_in_labels_survive(self):
        assert prompts.render_classification_prompt(["{x}"]).endswith("{x}")

    def test_empty_label_set(self):
        with pytest.raises(EmptyLabelSetError):
            prompts.render_classification_prompt([])

    def test_empty_label(self):
        with pytest.raises(EmptyLabelError):
            prompts.render_class_description_prompts("")


class TestTemplates:
    def test_default(self):
        assert prompts.render_label_template(DEFAULT_TEMPLATE, "cat") == "A photo of cat"

    @pytest.mark.parametrize(
        "tag,expected",
        [
            ("pets", "A photo of beagle, a type of pets"),
            ("dtd", "A photo of beagle, a textural category"),
            ("cars", "A photo of beagle, a car model"),
        ],
    )
    def test_dataset_overrides(self, tag, expected):
        assert prompts.render_label_template(prompts.dataset_template(tag), "beagle") == expected

    def test_unknown_tag(self):
        with pytest.raises(KeyError):
            prompts.dataset_template("nope")

    @pytest.mark.parametrize("pattern", ["no slot", "{class_label} {class_label}"])
    def test_slot_count(self, pattern):
        with pytest.raises(ValueError):
            LabelTemplate(pattern)


class TestCombined:
    def test_prompt_contains_both(self):
        text = prompts.render_combined_prompt(["a", "b"])
        assert DESCRIPTION in text and CLASSIFICATION + "a, b" in text

    def test_split(self):
        desc, pred = prompts.split_combined_response("Description: a small dog\non grass\nClass: dog")
        assert desc == "a small dog\non grass"
        assert pred == "dog"

    def test_split_uses_last_class_line(self):
        _, pred = prompts.split_combined_response("Description: x\nclass: one\nClass: two")
        assert pred == "two"

    @pytest.mark.parametrize("text", ["just words", "Class: dog", "Description: x\nClass:"])
    def test_split_errors(self, text):
        with pytest.raises(ProtocolError):
            prompts.split_combined_response(text)
