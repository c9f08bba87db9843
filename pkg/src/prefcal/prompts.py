"""Prompt templates for dimension mining and the four scoring modes.

Templates use ``{name}`` slots and are filled in a single pass by
:func:`render`, so substituted text is never re-scanned for slots and the
JSON braces inside the templates need no escaping.

The mining, Observer, Debater and Judge templates are the published ones.
Single-image multi-agent variants (mode 3) drop the second image slot from
them; the single-shot templates (modes 1 and 2) ask for the Judge's output
schema directly.
"""

from __future__ import annotations

import re
from typing import Mapping

EXTRACTION = """\
You are an expert urban perception researcher. I will show
you street-view images that have been rated by crowdsourced
participants on the perception dimension: "{category}".

HIGH-rated images (TrueSkill mu > 75th percentile):
{high_image_descriptions}

LOW-rated images (TrueSkill mu < 25th percentile):
{low_image_descriptions}

Based on the visual differences between HIGH and LOW images,
identify 5-10 specific, visually observable dimensions that
explain why some scenes are perceived as more "{category}"
than others.

Output JSON format:
{
  "dimensions": [
    {
      "name": "Dimension Name",
      "description": "What this dimension measures",
      "high_indicator": "Visual cues for high scores",
      "low_indicator": "Visual cues for low scores"
    }
  ]
}

Requirements:
- Each dimension must be visually observable from a street
  view image
- Each dimension must be continuously scorable (1-10 scale)
- Dimensions should be universally applicable across cities
"""

ELITE_REFERENCE = """\

Soft reference (current best dimension set; use it as inspiration only,
large deviations are welcome):
{elite_definitions}
"""

MUTATION = """\
You are an expert urban perception researcher refining a set of
visually observable dimensions for the perception dimension "{category}".

Current best dimensions:
{elite_definitions}

Replace exactly these dimensions with {count} new, different
dimensions that could explain the perception better:
{targets}

The new dimensions must not repeat any dimension kept from the
current set.

Output JSON format:
{
  "dimensions": [
    {
      "name": "Dimension Name",
      "description": "What this dimension measures",
      "high_indicator": "Visual cues for high scores",
      "low_indicator": "Visual cues for low scores"
    }
  ]
}
"""

OBSERVER = """\
You are an objective Observer. Examine two street-view
images and describe what you see along each evaluation
dimension. Do NOT make judgments or comparisons -- only
describe observable visual details.

Category: {category}
Dimensions:
{dimension_definitions}

For each dimension, describe what you observe in:
- Image A: [visual details]
- Image B: [visual details]

Output JSON:
{
  "observations": {
    "dimension_name": {
      "image_a": "description of what you see",
      "image_b": "description of what you see"
    }
  }
}
"""

DEBATER = """\
You are a Debater. Given the Observer's descriptions of
two street-view images, argue BOTH sides for each
dimension -- why Image A might score higher AND why
Image B might score higher.

Observer's descriptions:
{observer_output}

Category: {category}
Dimensions:
{dimension_definitions}

For each dimension, provide:
- Argument for Image A scoring higher
- Argument for Image B scoring higher
- Key uncertainties or ambiguities

Output JSON:
{
  "debates": {
    "dimension_name": {
      "argument_for_a": "why A might score higher",
      "argument_for_b": "why B might score higher",
      "uncertainties": "what is ambiguous"
    }
  }
}
"""

JUDGE = """\
You are the final Judge. Given the Observer's descriptions
and Debater's arguments, produce final scores for both
images on each dimension.

Observer's descriptions:
{observer_output}

Debater's arguments:
{debater_output}

Category: {category}
Dimensions:
{dimension_definitions}

Score each image on each dimension from 1 (lowest) to 10
(highest). Also determine the overall winner.

Output JSON:
{
  "image_a_scores": {
    "dimension_name": score (1-10)
  },
  "image_b_scores": {
    "dimension_name": score (1-10)
  },
  "overall_intensity_a": weighted_sum,
  "overall_intensity_b": weighted_sum,
  "winner": "left" | "right" | "equal",
  "ai_dimension_weights": {
    "dimension_name": weight (0-1)
  }
}
"""

OBSERVER_SINGLE = """\
You are an objective Observer. Examine one street-view
image and describe what you see along each evaluation
dimension. Do NOT make judgments -- only describe
observable visual details.

Category: {category}
Dimensions:
{dimension_definitions}

Output JSON:
{
  "observations": {
    "dimension_name": "description of what you see"
  }
}
"""

DEBATER_SINGLE = """\
You are a Debater. Given the Observer's description of
one street-view image, argue BOTH sides for each
dimension -- why the image might score HIGH and why it
might score LOW.

Observer's descriptions:
{observer_output}

Category: {category}
Dimensions:
{dimension_definitions}

Output JSON:
{
  "debates": {
    "dimension_name": {
      "argument_for_high": "why it might score high",
      "argument_for_low": "why it might score low",
      "uncertainties": "what is ambiguous"
    }
  }
}
"""

JUDGE_SINGLE = """\
You are the final Judge. Given the Observer's description
and Debater's arguments, produce final scores for the
image on each dimension.

Observer's descriptions:
{observer_output}

Debater's arguments:
{debater_output}

Category: {category}
Dimensions:
{dimension_definitions}

Score the image on each dimension from 1 (lowest) to 10
(highest).

Output JSON:
{
  "scores": {
    "dimension_name": score (1-10)
  }
}
"""

DIRECT_SINGLE = """\
You are an expert urban perception rater. Examine one
street-view image and score it on each dimension from
1 (lowest) to 10 (highest).

Category: {category}
Dimensions:
{dimension_definitions}

Output JSON:
{
  "scores": {
    "dimension_name": score (1-10)
  }
}
"""

DIRECT_PAIR = """\
You are an expert urban perception rater. Examine two
street-view images (Image A, then Image B) and score both
on each dimension from 1 (lowest) to 10 (highest). Also
determine the overall winner.

Category: {category}
Dimensions:
{dimension_definitions}

Output JSON:
{
  "image_a_scores": {
    "dimension_name": score (1-10)
  },
  "image_b_scores": {
    "dimension_name": score (1-10)
  },
  "winner": "left" | "right" | "equal"
}
"""

REASK = """\


Your previous reply could not be used ({reason}).
Reply again with only the JSON object described above.
"""

_SLOT = re.compile(r"\{([a-z_]+)\}")


def render(template: str, values: Mapping[str, str]) -> str:
    """Fill ``{slot}`` placeholders whose names appear in ``values``; leave others intact."""

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return values[key] if key in values else m.group(0)

    return _SLOT.sub(sub, template)
