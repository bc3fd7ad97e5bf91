from .core import (FREE_TEXT, SCHEMAS, Agent, AgentProvider, AgentRequest, AgentTranscript, ImageRef, Message,
                   TranscriptLog, request_hash)
from .http import HttpEndpoint, HttpProvider, http_complete
from .mock import MockProvider
from .tasks import Crop, NodeSummary, caption_node, list_objects, relation_label, summarize_scene

__all__ = [
    "FREE_TEXT", "SCHEMAS", "Agent", "AgentProvider", "AgentRequest", "AgentTranscript", "ImageRef", "Message",
    "TranscriptLog", "request_hash", "HttpEndpoint", "HttpProvider", "http_complete", "MockProvider",
    "Crop", "NodeSummary", "caption_node", "list_objects", "relation_label", "summarize_scene",
]
