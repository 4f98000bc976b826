"""Published JSON schemas for the wire formats.

These are the normative shapes for the prediction JSON-lines records and
the evaluation report; tests validate real outputs against them.
"""

BOX_SCHEMA = {
    "type": "object",
    "properties": {
        "x": {"type": "number"},
        "y": {"type": "number"},
        "w": {"type": "number", "exclusiveMinimum": 0},
        "h": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["x", "y", "w", "h"],
    "additionalProperties": False,
}

PREDICTION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "relational caption prediction",
    "type": "object",
    "properties": {
        "image_id": {"type": "integer"},
        "subject_box": BOX_SCHEMA,
        "object_box": BOX_SCHEMA,
        "caption": {"type": "string", "minLength": 1},
        "pos": {"type": "array", "items": {"enum": ["SUBJ", "PRED", "OBJ"]}},
        "word_probs": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "minItems": 1,
        },
        "confidence": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
    "required": ["image_id", "subject_box", "object_box", "caption", "pos",
                 "word_probs", "confidence"],
    "additionalProperties": False,
}

EVAL_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "relational captioning evaluation report",
    "type": "object",
    "properties": {
        "map_percent": {"type": "number", "minimum": 0, "maximum": 100},
        "image_level_recall": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_meteor": {"type": "number", "minimum": 0, "maximum": 1},
        "words_per_img": {"type": "number", "minimum": 0},
        "words_per_box": {"type": "number", "minimum": 0},
        "vrd_phrase_recall": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "vrd_relationship_recall": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "pos_accuracy": {
            "type": ["object", "null"],
            "properties": {
                "overall": {"type": "number", "minimum": 0, "maximum": 1},
                "SUBJ": {"type": "number", "minimum": 0, "maximum": 1},
                "PRED": {"type": "number", "minimum": 0, "maximum": 1},
                "OBJ": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
    "required": ["map_percent", "image_level_recall", "mean_meteor",
                 "words_per_img", "words_per_box", "vrd_phrase_recall",
                 "vrd_relationship_recall", "pos_accuracy"],
    "additionalProperties": False,
}
