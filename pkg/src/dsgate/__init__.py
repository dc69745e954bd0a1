"""dsgate: a declarative data-services gateway.

Exposes heterogeneous backend stores as uniform RESTful APIs defined in
JSON project files, with bind-variable query templates, modifier chains,
pluggable datasource providers, token security, rate limiting, audit
trails, and hot-reloadable configuration.
"""

__version__ = "0.1.0"
