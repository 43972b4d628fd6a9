"""Published grammar of the query language, used in docs and in the agent prompt."""

EBNF = r"""
program    = stage , { "|" , stage } ;
stage      = filter | derive | group_by | aggregate | select | sort | limit ;

filter     = "FILTER" , column , comparator , literal ;
comparator = "==" | "!=" | "<" | "<=" | ">" | ">=" | "CONTAINS" ;
derive     = "DERIVE" , column , "=" , expr ;
group_by   = "GROUP" , "BY" , column , { "," , column } ;
aggregate  = "AGGREGATE" , function , "(" , ( column | "*" ) , ")" ;
function   = "COUNT" | "SUM" | "MEAN" | "MEDIAN" | "MIN" | "MAX" | "COUNT_DISTINCT" ;
select     = "SELECT" , column , { "," , column } ;
sort       = "SORT" , column , [ "ASC" | "DESC" ] ;
limit      = "LIMIT" , integer ;

expr       = term , { ( "+" | "-" ) , term } ;
term       = factor , { ( "*" | "/" ) , factor } ;
factor     = number | column | "-" , factor | "(" , expr , ")"
           | "YEARS_BETWEEN" , "(" , column , "," , ( "@ref" | string ) , ")" ;

literal    = [ "-" ] , number | string | "TRUE" | "FALSE" ;
column     = identifier | "`" , { any character ; "``" for a backtick } , "`" ;
identifier = letter | "_" , { letter | digit | "_" } ;
number     = digit , { digit } , [ "." , digit , { digit } ] , [ ( "e" | "E" ) , [ "+" | "-" ] , digit , { digit } ] ;
string     = '"' , { character | "\" , ( '"' | "\" | "n" | "t" | "r" ) } , '"' ;
"""

SUMMARY = """\
A program is a pipeline of stages separated by "|", applied left to right:
  FILTER <column> <op> <literal>     op: == != < <= > >= CONTAINS (case-insensitive substring)
  DERIVE <new_column> = <expr>       expr: arithmetic (+ - * /) over numeric columns and numbers,
                                     or YEARS_BETWEEN(<date_column>, @ref) for age in whole years
  GROUP BY <column>[, <column>...]   must be followed directly by AGGREGATE
  AGGREGATE <FUNC>(<column> | *)     FUNC: COUNT SUM MEAN MEDIAN MIN MAX COUNT_DISTINCT
  SELECT <column>[, <column>...]
  SORT <column> [ASC|DESC]
  LIMIT <n>
Only SORT or LIMIT may follow AGGREGATE, and only when it is grouped.
String literals use double quotes; dates are written as "YYYY-MM-DD" strings.
@ref is the dataset reference date. Column names are case-sensitive.
Example (angle brackets stand for real column names):
  FILTER <sex_column> == "F" | DERIVE <age> = YEARS_BETWEEN(<birth_date_column>, @ref) | AGGREGATE MEDIAN(<age>)
"""
