"""Task profiles: per-stage instruction templates, sentinels, and verdict labels.

Templates carry two markers resolved at render time: the literal token
"N examples" (the example count) and, for guideline-driven text generation,
"[Guidelines]". Everything downstream parses against the surface forms
defined here, so this module is the single source of truth for them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

TEXTGEN = "textgen"
TEXTFILTER = "textfilter"
BOXGEN = "boxgen"
BOXREFINE = "boxrefine"
VALIDATION = "validation"
TEXTREFINE = "textrefine"
STAGES = (TEXTGEN, TEXTFILTER, BOXGEN, BOXREFINE, VALIDATION, TEXTREFINE)

BOX_ACCEPT_SENTINEL = "BOUNDING BOX IS ACCURATE, PLEASE TERMINATE"
COMMENT_ACCEPT_SENTINEL = "COMMENT IS ACCURATE, PLEASE TERMINATE"


class ValidationVerdict(enum.Enum):
    """Four-way routing decision; values are the exact label surface forms."""

    BOTH_CORRECT = "Both Correct"
    INCORRECT_COMMENT = "Incorrect Comment"
    INCORRECT_BBOX = "Incorrect Bbox"
    BOTH_INCORRECT = "Both Incorrect"

    @property
    def label(self) -> str:
        return self.value


VERDICT_BY_LABEL = {v.value: v for v in ValidationVerdict}


CRITIQUE_TEXTGEN_TEMPLATE = "For these sets of guidelines: [Guidelines]. Please find all the guideline violations in the UI provided. For violation found, please provide an explanation that includes these three things: 1. the expected standard (i.e. what good design should look like), 2. the gap between the current design and the expected standard (i.e. the critique for the design), and 3. how to fix the issue in the current design. For formatting each violation, please include these three things in separate sentences. For the expected standard (#1), start the sentence with 'The expected standard is that...'. For the gap (#2), start the sentence with 'In the current design, ...', and for how to fix the design (#3), start the sentence with 'To fix this...'. Please end each violation explanation with two newline characters (\\n\\n). Please be specific in your violation explanations, making sure to refer to specific UI elements and groups in the UI. After determining all guideline violations, please also share any other design feedback you have for the UI and follow the same format of providing the expected standard, the critique for the design, and how to fix the issue. We will provide N examples of a UI screenshot and a set of valid design comments. Please learn how to give valid design comments from these examples and apply this knowledge to determine valid design comments for the last UI. Please be specific in your comments, referring to specific UI elements by their text label or icon, like in the examples provided. Also, please do not return any comments regarding user testing nor adherence to platform standards."

CRITIQUE_TEXTFILTER_TEMPLATE = "For the provided UI and a list corresponding design comments, please filter out the incorrect design comments and return a list tuples. Each tuple contains its index i in the list, followed by True or False. The tuple would contain True if the design comment at index i in the input list is a valid design comment, and False if the design comment at index i is an invalid comment. Please analyze the UI screenshot to determine whether or not each design comment is valid. We will give N examples, where each UI screenshot is followed by a list of its corresponding design comments and an output list of tuples, where each tuple contains the list index and True/False indicating the validity of the design comment at that index. Please learn from these examples, analyzing the UI screenshot to see why each comment was considered valid or invalid. Finally, we will give a UI screenshot, followed by its corresponding design comments. Please output a list of tuples consisting of the comment's list index and an indication of each comment's validity, like in the provided examples. Please output False for the design comment if it is about consistency with the brand, user testing, or adherence to platform standards. Please only output this list of tuples and nothing else."

CRITIQUE_BOXGEN_TEMPLATE = "You will be providing bounding boxes coordinates for the provided UI screenshot and design comment. The bounding box will enclose a relevant region in the screenshot that is discussed in the design comment. You will use the coordinate axes along the edge of the screenshot to determine the coordinates of the bounding box. Please make sure you follow the provide coordinate axes, so that vertical bounding box coordinates are between 0 and 16 and horizontal bounding box coordinates are between 0 and 9, and format the bounding box coordinates as (left, top, right, bottom). Please do not output bounding boxes with area 0. Also, please only output the bounding box and nothing else. We will provide N examples of design comments, followed by the corresponding UI screenshot (with a coordinate axis along its edge) and a correct bounding box for the design comment in the UI screenshot based on the coordinate axis. Please learn how to determine accurate bounding boxes for the design comment in the UI screenshot based on these examples. We will provide a final design comment and UI screenshot; please apply what you have learned from the examples to determine an accurate bounding box for this final design comment and UI screenshot only."

CRITIQUE_BOXREFINE_TEMPLATE = "You will be refining bounding boxes for a given UI screenshot and design comment. The bounding box will enclose a relevant region in the screenshot that is discussed in the design comment. You will be given a proposed bounding box candidate and will evaluate whether or not this bounding box accurately encloses the region in the screenshot that is discussed in the comment. The proposed bounding box coordinates, in the format of (left_coordinate, top_coordinate, right_coordinate, bottom_coordinate) and is displayed as a blue box in the screenshot patch that is also provided, with some additional margin around the blue bounding box. Please reflect on whether or not this bounding box is accurate and look closely at the UI elements contained in the blue bounding box to judge its accuracy and relevance to the design comment. If the bounding box is not accurate, please output a new bounding box that you think is accurate in the format of (left_coordinate, top_coordinate, right_coordinate, bottom_coordinate), where each coordinate is determined from the coordinate axes along the edge of the UI screenshot provided earlier. Please make sure the new bounding box you output is accurate, and refer to the coordinate axes along the edge of the zoomed-in screenshot patch and the entire screenshot (provided earlier) to determine the bounding box coordinates. If the bounding box is accurate, please output 'BOUNDING BOX IS ACCURATE, PLEASE TERMINATE'. Please only output either the updated bounding or 'BOUNDING BOX IS ACCURATE, PLEASE TERMINATE' and nothing else. We will provide N examples of bounding box refinements for a given design comment, UI screenshot, and bounding box candidate. Please learn how to accurately refine bounding boxes for the design comment in the UI screenshot based on these examples. We will provide a final design comment, UI screenshot, and bounding box candidate; please apply what you have learned from the examples to accurately refine the bounding box candidate for this final design comment, UI screenshot, and the zoomed in patch showing the bounding box candidate."

CRITIQUE_VALIDATION_TEMPLATE = "You are given a UI screenshot, design comment for the UI screen, and a zoomed-in patch of the UI screenshot showing the corresponding bounding box for the design comment. Please evaluate the accuracy of the design comment and bounding box with respect to the UI screenshot. The bounding box is displayed as a blue box in the zoomed-in screenshot patch, and is supposed to contain the region in the UI screen that is targeted by the design comment. Please first evaluate if the design comment is valid for the provided UI screenshot, i.e. if it correctly points out a design issue and suggests an accurate way to fix it. Please analyze the provided UI screenshot to assess the comment's validity. If the design comment is valid, please next evaluate whether the blue box in zoomed-in UI screenshot contains the region that is relevant to the design comment. If the design comment is invalid and the blue box still contains a region in the UI screenshot with design issues, please return the label 'Incorrect Comment'. If the comment is valid, but the blue box does not contain the region relevant to the comment, please return the label 'Incorrect Bbox'. If the comment is invalid and the blue box does not contain a region with design issues, please return the label 'Both Incorrect'. Finally, if the design comment is valid and the blue box correctly contains a region in the UI that is relevant to the comment, please return the label 'Both Correct'. Please only return the appropiate label and nothing else. We will give N examples, the UI screenshot (labeled 'UI Screenshot'), followed by the design comment (labeled 'Design Comment'), a zoomed-in screenshot patch showing the blue bounding box (labeled 'Zoomed-in Patch'), and finally the correct label (labeled 'Label') for the accuracy of the UI screenshot, design comment, and corresponding bounding box. Please learn from these examples, to see how to correctly categorize the design comment and its corresponding bounding box by accuracy. Finally, we will give a UI screenshot, design comment, and a zoomed-in patch showing the corresponding blue bounding box. Please apply what you have learned from the examples to correctly classify the accuracy of the design comment and its corresponding bounding box."

CRITIQUE_TEXTREFINE_TEMPLATE = "You will be refining the design comment for a specific region in a UI screenshot. You will be given a UI screenshot, a zoomed-in patch of the screenshot with a blue box containing the region of interest, and a design comment for the UI region inside the blue box. Please evaluate whether or not the design comment accurately describes the design issue for the UI region inside the blue box. If the design comment is accurate, please output 'COMMENT IS ACCURATE, PLEASE TERMINATE'. If the design comment is not accurate, please refine the design comment to the accurate and output this accurate design comment for the region of interest, following the same format as the input design comment. We will provide N examples of bounding box refinements for each UI screenshot, region of interest, and design comment candidate for the region of interest. Please learn how to accurately refine the design comment for the region of interest in the UI screenshot based on these examples. We will provide a final UI screenshot, region of interest, and design comment candidate for the region of interest; please apply what you have learned from the examples to accurately refine design comment candidate for this final UI screenshot and region of interest. Please only output the refined comment or 'COMMENT IS ACCURATE, PLEASE TERMINATE' and nothing else."


DETECTION_TEXTGEN_TEMPLATE = "Please identify every distinct object in the provided image. For each object, output one line of the form 'category: <object category>; attributes: <comma separated attributes>'. Use lowercase singular category names and list every visible attribute of the object. Separate object lines with two newline characters (\\n\\n). We will provide N examples of an image and its list of objects with categories and attributes. Please learn from these examples and apply this knowledge to list the objects of the last image. Please only output the object lines and nothing else."

DETECTION_TEXTFILTER_TEMPLATE = "For the provided image and a list of candidate object descriptions, please filter out the incorrect descriptions and return a list of tuples. Each tuple contains the index i of a description in the input list, followed by True or False. The tuple would contain True if the description at index i matches an object actually visible in the image with the correct category and attributes, and False otherwise. We will give N examples, where each image is followed by a list of candidate descriptions and the output list of tuples. Please learn from these examples. Finally, we will give an image followed by its candidate descriptions. Please output the list of tuples and nothing else."

DETECTION_BOXGEN_TEMPLATE = "You will be providing bounding box coordinates for the provided image and object description. The bounding box will enclose the object referred to by the description. You will use the coordinate axes along the edge of the image to determine the coordinates of the bounding box. Please make sure vertical bounding box coordinates are between 0 and 16 and horizontal bounding box coordinates are between 0 and 9, and format the bounding box coordinates as (left, top, right, bottom). Please do not output bounding boxes with area 0. Also, please only output the bounding box and nothing else. We will provide N examples of object descriptions, followed by the corresponding image (with a coordinate axis along its edge) and a correct bounding box for the object. Please learn from these examples. We will provide a final object description and image; please output an accurate bounding box for this final pair only."

DETECTION_BOXREFINE_TEMPLATE = "You will be refining bounding boxes for a given image and object description. You will be given a proposed bounding box candidate, displayed as a blue box in the zoomed-in image patch that is also provided, with some additional margin around the blue bounding box. Please look closely at the region contained in the blue bounding box and judge whether it encloses the described object. If the bounding box is not accurate, please output a new bounding box in the format of (left_coordinate, top_coordinate, right_coordinate, bottom_coordinate), where each coordinate is determined from the coordinate axes along the edges of the image and the zoomed-in patch. If the bounding box is accurate, please output 'BOUNDING BOX IS ACCURATE, PLEASE TERMINATE'. Please only output either the updated bounding box or 'BOUNDING BOX IS ACCURATE, PLEASE TERMINATE' and nothing else. We will provide N examples of bounding box refinements for a given object description, image, and bounding box candidate. Please learn from these examples. We will provide a final object description, image, and bounding box candidate; please refine the bounding box candidate accordingly."

DETECTION_VALIDATION_TEMPLATE = "You are given an image, an object description, and a zoomed-in patch of the image showing the corresponding bounding box as a blue box. Please evaluate the accuracy of the object description and the bounding box. If the description does not match any object in the image but the blue box still contains a clearly identifiable object, please return the label 'Incorrect Comment'. If the description is correct but the blue box does not contain the described object, please return the label 'Incorrect Bbox'. If the description is incorrect and the blue box does not contain an identifiable object, please return the label 'Both Incorrect'. Finally, if the description is correct and the blue box contains the described object, please return the label 'Both Correct'. Please only return the appropriate label and nothing else. We will give N examples, each with the image, object description, zoomed-in patch, and the correct label. Please learn from these examples and classify the final case accordingly."

DETECTION_TEXTREFINE_TEMPLATE = "You will be refining the object description for a specific region in an image. You will be given the image, a zoomed-in patch with a blue box containing the region of interest, and a candidate description of the object inside the blue box, in the form 'category: <object category>; attributes: <comma separated attributes>'. If the description is accurate, please output 'COMMENT IS ACCURATE, PLEASE TERMINATE'. If it is not accurate, please output a corrected description in the same form. We will provide N examples of description refinements for a region of interest. Please learn from these examples. We will provide a final image, region of interest, and candidate description; please refine it accordingly. Please only output the refined description or 'COMMENT IS ACCURATE, PLEASE TERMINATE' and nothing else."


GUIDELINES_MARKER = "[Guidelines]"
N_EXAMPLES_MARKER = "N examples"

# which parser each stage's raw output goes through, resolved by name in the
# orchestrator so profiles stay import-light
DEFAULT_PARSERS = {
    TEXTGEN: "comment_list",
    TEXTFILTER: "filter_verdicts",
    BOXGEN: "box",
    BOXREFINE: "refine_step",
    VALIDATION: "verdict",
    TEXTREFINE: "text_refine_step",
}


class TemplateError(ValueError):
    """A template is missing or one of its markers cannot be resolved."""


def render_instruction(template: str, n_examples: int, guidelines: str | None = None) -> str:
    """Resolve the "N examples" marker and, when present, "[Guidelines]"."""
    if n_examples < 0:
        raise ValueError(f"n_examples must be >= 0, got {n_examples}")
    if N_EXAMPLES_MARKER not in template:
        raise TemplateError(f"template lacks the {N_EXAMPLES_MARKER!r} marker")
    out = template.replace(N_EXAMPLES_MARKER, f"{n_examples} examples")
    if GUIDELINES_MARKER in out:
        if guidelines is None:
            raise TemplateError("template expects guidelines text but none was given")
        out = out.replace(GUIDELINES_MARKER, guidelines)
    return out


@dataclass(frozen=True)
class TaskProfile:
    """A task's complete prompt surface: templates, parser choices, guidelines."""

    name: str
    templates: dict[str, str]
    parsers: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PARSERS))
    guidelines: str = ""

    def __post_init__(self) -> None:
        missing = [s for s in STAGES if s not in self.templates]
        if missing:
            raise TemplateError(f"profile {self.name!r} lacks templates for: {', '.join(missing)}")
        for stage in STAGES:
            if N_EXAMPLES_MARKER not in self.templates[stage]:
                raise TemplateError(f"profile {self.name!r} stage {stage!r} lacks the example-count marker")
            if stage not in self.parsers:
                raise TemplateError(f"profile {self.name!r} has no parser for stage {stage!r}")

    def instruction(self, stage: str, n_examples: int) -> str:
        if stage not in self.templates:
            raise TemplateError(f"unknown stage {stage!r}")
        return render_instruction(self.templates[stage], n_examples, self.guidelines)


def design_critique_profile(guidelines: str = "") -> TaskProfile:
    return TaskProfile(
        name="design-critique",
        templates={
            TEXTGEN: CRITIQUE_TEXTGEN_TEMPLATE,
            TEXTFILTER: CRITIQUE_TEXTFILTER_TEMPLATE,
            BOXGEN: CRITIQUE_BOXGEN_TEMPLATE,
            BOXREFINE: CRITIQUE_BOXREFINE_TEMPLATE,
            VALIDATION: CRITIQUE_VALIDATION_TEMPLATE,
            TEXTREFINE: CRITIQUE_TEXTREFINE_TEMPLATE,
        },
        guidelines=guidelines,
    )


def open_vocab_detection_profile() -> TaskProfile:
    return TaskProfile(
        name="open-vocab-detection",
        templates={
            TEXTGEN: DETECTION_TEXTGEN_TEMPLATE,
            TEXTFILTER: DETECTION_TEXTFILTER_TEMPLATE,
            BOXGEN: DETECTION_BOXGEN_TEMPLATE,
            BOXREFINE: DETECTION_BOXREFINE_TEMPLATE,
            VALIDATION: DETECTION_VALIDATION_TEMPLATE,
            TEXTREFINE: DETECTION_TEXTREFINE_TEMPLATE,
        },
    )


PROFILE_FACTORIES = {
    "design-critique": design_critique_profile,
    "open-vocab-detection": lambda guidelines="": open_vocab_detection_profile(),
}


def format_detection_text(category: str, attributes: list[str]) -> str:
    """The surface form detection items travel in: 'category: X; attributes: a, b'."""
    if not category:
        raise ValueError("category must be nonempty")
    return f"category: {category}; attributes: {', '.join(attributes)}"


def parse_detection_text(text: str) -> tuple[str, list[str]]:
    """Inverse of format_detection_text; tolerant of surrounding whitespace."""
    body = text.strip()
    if not body.lower().startswith("category:"):
        raise ValueError(f"not a detection item: {text[:80]!r}")
    body = body[len("category:") :]
    if ";" in body:
        cat_part, _, attr_part = body.partition(";")
        attr_part = attr_part.strip()
        if not attr_part.lower().startswith("attributes:"):
            raise ValueError(f"malformed attribute list in {text[:80]!r}")
        attr_part = attr_part[len("attributes:") :]
        attributes = [a.strip() for a in attr_part.split(",") if a.strip()]
    else:
        cat_part, attributes = body, []
    category = cat_part.strip()
    if not category:
        raise ValueError(f"empty category in {text[:80]!r}")
    return category, attributes
