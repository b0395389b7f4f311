#include <stdio.h>
#include <string.h>
#include "dcbench.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "failed: %s (line %d)\n", #cond, __LINE__); return 1; } } while (0)

int main(int argc, char **argv) {
    DcbAction a;
    CHECK(dcb_threshold_rule(0.8, 0.8, &a) == DCB_STATUS_OK && a == DCB_ACTION_EXECUTE);
    CHECK(dcb_calendar_policy(1.0, true, &a) == DCB_STATUS_OK && a == DCB_ACTION_CLARIFY);

    double p;
    CHECK(dcb_blend_composite(0.5, 1.0, 0.4, &p) == DCB_STATUS_OK && p > 0.7999 && p < 0.8001);
    CHECK(dcb_blend_composite(0.5, 1.0, 1.5, &p) == DCB_STATUS_CONFIG);
    CHECK(strstr(dcb_last_error_message(), "alpha") != NULL);

    DcbGraphInput in = { 0.1, 0.05, true, 4, 2, 3 };
    CHECK(dcb_graph_policy(&in, 0.4, 0.5, &a) == DCB_STATUS_OK && a == DCB_ACTION_CLARIFY);
    CHECK(dcb_graph_policy(NULL, 0.4, 0.5, &a) == DCB_STATUS_NULL_POINTER);

    if (argc > 1) {
        DcbTraceSet *set = NULL;
        CHECK(dcb_traces_open(argv[1], &set) == DCB_STATUS_OK);
        size_t n = 0;
        CHECK(dcb_traces_len(set, &n) == DCB_STATUS_OK && n == 150);
        double tau = 0.9, alpha = 0.4;
        char *json = NULL;
        CHECK(dcb_traces_sweep(set, &tau, 1, &alpha, 1, 2, &json) == DCB_STATUS_OK);
        CHECK(strstr(json, "\"bucket\":\"medium\"") != NULL);
        dcb_string_free(json);
        dcb_traces_free(set);
    }
    puts("ok");
    return 0;
}
