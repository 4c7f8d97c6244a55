"""
Stage tracing with OpenTelemetry.

PINADAPT_TRACE=console prints finished spans to stderr; setting
OTEL_EXPORTER_OTLP_ENDPOINT ships them to a collector. With neither, the
global no-op tracer is used and spans cost nothing.
"""

import os
import sys
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter, SimpleSpanProcessor
from opentelemetry.trace import Status, StatusCode

SERVICE_NAME = "pin-adapt"
_configured = False


def configure_tracing() -> bool:
    """Install a tracer provider when an exporter is requested; returns whether one was installed"""
    global _configured
    if _configured:
        return True
    console = os.getenv("PINADAPT_TRACE", "").lower() == "console"
    endpoint = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT")
    if not console and not endpoint:
        return False

    provider = TracerProvider(resource=Resource.create({"service.name": SERVICE_NAME}))
    if console:
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr)))
    if endpoint:
        from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter

        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint)))
    trace.set_tracer_provider(provider)
    _configured = True
    return True


def shutdown_tracing() -> None:
    provider = trace.get_tracer_provider()
    if _configured and hasattr(provider, "shutdown"):
        provider.shutdown()


@contextmanager
def stage_span(stage: str, attributes: Optional[Dict] = None) -> Iterator[trace.Span]:
    tracer = trace.get_tracer(SERVICE_NAME)
    with tracer.start_as_current_span(f"pin-adapt.{stage}") as span:
        for key, value in (attributes or {}).items():
            if value is not None:
                span.set_attribute(key, value if isinstance(value, (bool, int, float, str)) else str(value))
        try:
            yield span
        except Exception as error:
            span.set_status(Status(StatusCode.ERROR, str(error)))
            raise
