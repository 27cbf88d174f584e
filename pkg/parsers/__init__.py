# parsers package